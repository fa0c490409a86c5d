import numpy as np
import pytest

from sggkit.config import DataConfig, ModelConfig
from sggkit.data import (Dataset, entity_labels, gen_scene, render_features,
                         schema_tables)
from sggkit.errors import ConfigError
from sggkit.model import SGModel


def _cfgs():
    d = DataConfig(entity_classes=6, predicate_classes=5, grid_width=8,
                   grid_height=8, grid_channels=32)
    m = ModelConfig(width=32, ffn_hidden=48, entity_queries=10,
                    predicate_queries=8, entity_layers=2, stages=2)
    return m, d


def _grid(d):
    table, cue = schema_tables(d)
    ent_mat = table.matrix(entity_labels(d.entity_classes))
    scene = gen_scene(d, 42)
    return scene, render_features(scene, ent_mat, cue, d)


def test_width_must_match_grid_channels():
    m, d = _cfgs()
    m.width = 16
    with pytest.raises(ConfigError):
        SGModel(m, d)


def test_forward_output_shapes():
    m, d = _cfgs()
    model = SGModel(m, d)
    scene, grid = _grid(d)
    model.store.begin_step()
    out = model.forward(grid)
    assert out.ent_logits.shape == (10, 7)     # entity classes + no-object
    assert out.ent_boxes.shape == (10, 4)
    assert out.pred_logits.shape == (8, 6)     # predicate classes + no-relation
    assert out.sub_logits.shape == (8, 7)
    assert out.obj_boxes.shape == (8, 4)
    assert out.q_ent_end.shape == (10, 32)
    assert out.q_pred_end.shape == (8, 32)


def test_boxes_within_unit_interval():
    m, d = _cfgs()
    model = SGModel(m, d)
    _, grid = _grid(d)
    model.store.begin_step()
    out = model.forward(grid)
    for t in (out.ent_boxes, out.pred_boxes, out.sub_boxes, out.obj_boxes):
        assert np.all(t.data > 0.0) and np.all(t.data < 1.0)


def test_predict_returns_normalized_records():
    m, d = _cfgs()
    model = SGModel(m, d)
    _, grid = _grid(d)
    ents, preds = model.predict(grid)
    assert len(ents) == 10 and len(preds) == 8
    for e in ents:
        assert abs(e.probs.sum() - 1.0) < 1e-6
        assert e.probs.shape == (7,)
    for p in preds:
        assert abs(p.probs.sum() - 1.0) < 1e-6
        assert abs(p.subject.probs.sum() - 1.0) < 1e-6
        assert abs(p.object.probs.sum() - 1.0) < 1e-6


def test_predict_logit_adjust_needs_frequency():
    m, d = _cfgs()
    model = SGModel(m, d)
    _, grid = _grid(d)
    with pytest.raises(ConfigError):
        model.predict(grid, tau=1.0)


def test_classifier_rows_initialized_from_table():
    m, d = _cfgs()
    model = SGModel(m, d)
    ent_rows = model.class_table.matrix(entity_labels(d.entity_classes))
    w = model.store.value("head.ent_cls.w")
    assert np.array_equal(w[:6], ent_rows.astype(np.float32))
    assert np.all(w[6] == 0)
    assert model.store.param("head.ent_cls.w").lr_mult == 0.1


def test_mode_override_changes_output():
    m, d = _cfgs()
    model = SGModel(m, d)
    _, grid = _grid(d)
    model.store.begin_step()
    out_bi = model.forward(grid)
    model.store.begin_step()
    out_none = model.forward(grid, mode="none")
    assert not np.array_equal(out_bi.q_ent_end.data, out_none.q_ent_end.data)
