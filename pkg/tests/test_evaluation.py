import numpy as np
import pytest

from taconv.calibration import SeverityProfile
from taconv.errors import TAConvError
from taconv.evaluation import (CLEAN, ProfileMismatch, RobustnessMatrix, evaluate_matrix, export_report,
                               matrix_csv, matrix_table)
from taconv.layers import model_hash
from taconv.perturbations import ADVERSARIAL, NATURAL_KINDS, AttackSpec, PerturbationSpec, bim_attack, perturb_batch
from taconv.training import accuracy

SEVERITIES = {"rotation_scaling": 0.2, "elastic": 2.0, "gaussian_blur": 0.8, "gaussian_noise": 0.2,
              "object_occlusion": 0.25, "snow": 6.0, ADVERSARIAL: 0.03}


def _profile(models, extra_id=None):
    entries = {k: {"severity": s, "drop": 10.0, "mse": 1.0, "accuracy": 89.0} for k, s in SEVERITIES.items()}
    return SeverityProfile(entries, 10.0, 1.0, 99.0, extra_id or model_hash(models["standard"]), "d", eval_seed=3)


@pytest.fixture(scope="module")
def small(desk):
    models = desk["models"]
    data = desk["report"].head(90)
    matrix = evaluate_matrix(models, data, _profile(models), AttackSpec(0.03, steps=3))
    return models, data, matrix


def test_layout_and_seen_flags(small):
    models, _, m = small
    assert m.rows == [CLEAN] + list(NATURAL_KINDS) + [ADVERSARIAL]
    assert m.cols == list(models)
    seen = np.asarray(m.seen)
    assert seen[:, m.cols.index("standard")].sum() == 0
    for col in ("elastic", "rotation_scaling"):
        j = m.cols.index(col)
        assert seen[:, j].sum() == 1 and m.rows[int(np.argmax(seen[:, j]))] == col
    assert m.meta["attacks"][ADVERSARIAL]["steps"] == 3


def test_cells_match_single_cell_reruns(small):
    models, data, m = small
    for name in ("standard", "elastic"):
        model = models[name]
        assert m.cell(CLEAN, name) == accuracy(model, data.images, data.labels)
        imgs = perturb_batch(data.images, PerturbationSpec("snow", SEVERITIES["snow"], seed=3))
        assert m.cell("snow", name) == accuracy(model, imgs, data.labels)
        adv = bim_attack(data.images, data.labels, model, AttackSpec(SEVERITIES[ADVERSARIAL], 3))
        assert m.cell(ADVERSARIAL, name) == accuracy(model, adv, data.labels)


def test_json_roundtrip(small, tmp_path):
    m = small[2]
    back = RobustnessMatrix.from_json(m.to_json())
    assert np.max(np.abs(back.as_array() - m.as_array())) < 1e-9
    assert back.rows == m.rows and back.seen == m.seen and back.meta == m.meta
    paths = export_report(m, tmp_path)
    assert RobustnessMatrix.from_json(paths["json"].read_text()).to_json() == m.to_json()
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "condition," + ",".join(m.cols) and len(lines) == len(m.rows) + 1


def test_table_headers_and_markers(small):
    m = small[2]
    table = matrix_table(m).splitlines()
    assert table[0].split() == ["condition"] + m.cols
    assert sum(line.count("*") for line in table[1:-1]) == int(np.asarray(m.seen).sum())


def test_one_by_one_csv():
    m = RobustnessMatrix([CLEAN], ["standard"], [[97.5]], [[False]])
    assert matrix_csv(m) == "condition,standard\nclean,97.5\n"


def test_matrix_validation():
    with pytest.raises(ValueError):
        RobustnessMatrix([CLEAN], ["a"], [[101.0]], [[False]])
    with pytest.raises(ValueError):
        RobustnessMatrix([CLEAN], ["a"], [[50.0]], [[False, True]])


def test_profile_mismatch(desk):
    models = desk["models"]
    with pytest.raises(ProfileMismatch, match="calibrated on model"):
        evaluate_matrix(models, desk["report"].head(10), _profile(models, extra_id="0" * 64))
    with pytest.raises(ProfileMismatch):
        evaluate_matrix({"elastic": models["elastic"]}, desk["report"].head(10), _profile(models))


def test_parameter_change_is_detected(desk, monkeypatch):
    import taconv.evaluation as ev
    models = {"standard": desk["models"]["standard"].clone()}
    original = ev.accuracy

    def meddle(model, images, labels, batch_size=256):
        model.head_b.data = model.head_b.data + 1.0
        return original(model, images, labels, batch_size)

    monkeypatch.setattr(ev, "accuracy", meddle)
    profile = SeverityProfile({}, 10.0, 1.0, 99.0, model_hash(models["standard"]), "d")
    with pytest.raises(TAConvError, match="changed"):
        evaluate_matrix(models, desk["report"].head(5), profile)
