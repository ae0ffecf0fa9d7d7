import json

import numpy as np
import pytest

from spectracast.autodiff import Tensor, clamp, conv2d, grad_check, precision, stack
from spectracast.cells import CellState, convlstm_cell, stlstm_cell, vitlstm_cell
from spectracast.errors import CheckpointError, ConfigError, DimensionError
from spectracast.forecaster import (
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
    layer_params,
    model_forward,
    model_init,
    model_param_shapes,
    output_head,
    param_count,
)
from spectracast.swin import SwinConfig
from spectracast.training import sequence_loss

TINY_SWIN = SwinConfig(patch=2, window=2, shift=1, heads=2, embed_dim=8)


def tiny(cell="vitlstm", **kw):
    base = dict(cell=cell, layers=2, channels=3, height=8, width=8, input_len=3, pred_len=2,
                swin=TINY_SWIN, kernel=3, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def randomized(cfg, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    p = model_init(cfg, seed)
    return {k: Tensor(v.data + scale * rng.standard_normal(v.shape)) for k, v in p.items()}


def manual_unroll(frames, cfg, params):
    """Step-by-step loop calling the cells directly."""
    b = frames.shape[0]
    z = np.zeros((b, cfg.hidden, cfg.height, cfg.width), dtype=frames.dtype)
    h = [Tensor(z) for _ in range(cfg.layers)]
    c = [Tensor(z) for _ in range(cfg.layers)]
    m = Tensor(z)
    preds = []
    x_hat = None
    for t in range(cfg.input_len + cfg.pred_len - 1):
        x = Tensor(frames[:, t]) if t < cfg.input_len else x_hat
        for layer in range(cfg.layers):
            p = layer_params(params, layer)
            if cfg.cell == "vitlstm":
                s = vitlstm_cell(x, CellState(h[layer], c[layer]), m, p, cfg.swin)
                m = s.m
            elif cfg.cell == "stlstm":
                s = stlstm_cell(x, CellState(h[layer], c[layer]), m, p)
                m = s.m
            else:
                s = convlstm_cell(x, h[layer], c[layer], p)
            h[layer], c[layer] = s.h, s.c
            x = s.h
        x_hat = conv2d(h[-1], params["head.w"], params["head.b"])
        preds.append(x_hat)
    return clamp(stack(preds[cfg.input_len - 1:], axis=1), 0.0, 1.0)


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny()
        (tmp_path / "m.json").write_text(json.dumps(cfg.to_dict()))
        assert ModelConfig.from_json(tmp_path / "m.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"cell": "vitlstm", "depth": 3})

    @pytest.mark.parametrize("kw", [{"layers": 0}, {"cell": "gru"}, {"height": 10}, {"pred_len": 0},
                                    {"cell": "stlstm", "kernel": 4}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            model_init(tiny(**kw))

    def test_literal_state_width(self):
        assert ModelConfig().hidden == 3
        assert tiny(hidden_mult=4).hidden == 12


class TestInit:
    def test_seeded(self):
        a, b = model_init(tiny(), 5), model_init(tiny(), 5)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
        assert any(a[k].data.tobytes() != model_init(tiny(), 6)[k].data.tobytes() for k in a)

    def test_closed_form_param_count(self):
        # one attention stack, in=out=3, p=2, D=8, w=2, heads=2, r=4
        d, p2, c = 8, 4, 3
        block = 2 * d + (d * 3 * d + 3 * d) + 9 * 2 + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
        stack_ = (c * p2 * d + d) + 2 * block + (d * c * p2 + c * p2)
        per_layer = 16 * stack_ + 7 * c + c * 2 * c
        head = c * c + c
        assert param_count(tiny()) == 2 * per_layer + head
        assert param_count(tiny()) == sum(int(np.prod(v.shape)) for v in model_init(tiny()).values())

    def test_convlstm_count(self):
        assert param_count(tiny("convlstm", layers=1)) == 12 * 6 * 9 + 12 + 9 + 3

    def test_names_unique_and_prefixed(self):
        names = list(model_param_shapes(tiny()))
        assert len(names) == len(set(names))
        assert all(n.startswith(("layer0.", "layer1.", "head.")) for n in names)


class TestHead:
    def test_identity(self, rng):
        h = rng.standard_normal((1, 3, 4, 4)).astype(np.float32) * 2
        p = {"head.w": Tensor(np.eye(3).reshape(3, 3, 1, 1)), "head.b": Tensor(np.zeros(3))}
        np.testing.assert_array_equal(output_head(Tensor(h), p).data, h)

    def test_clamp_at_inference(self):
        p = {"head.w": Tensor(np.eye(1).reshape(1, 1, 1, 1)), "head.b": Tensor(np.zeros(1))}
        h = Tensor(np.full((1, 1, 1, 1), 1.3))
        assert output_head(h, p, clamp_output=True).data.item() == 1.0
        assert output_head(h, p).data.item() == pytest.approx(1.3)

    def test_zero_projection(self, rng):
        p = {"head.w": Tensor(np.zeros((3, 3, 1, 1))), "head.b": Tensor(np.zeros(3))}
        assert np.all(output_head(Tensor(rng.random((2, 3, 4, 4))), p).data == 0)

    def test_shape_mismatch(self):
        p = {"head.w": Tensor(np.zeros((3, 4, 1, 1))), "head.b": Tensor(np.zeros(3))}
        with pytest.raises(DimensionError):
            output_head(Tensor(np.zeros((1, 3, 4, 4))), p)


class TestForward:
    def test_output_shape(self, rng):
        cfg = ModelConfig(cell="vitlstm", layers=1, height=16, width=16, input_len=3, pred_len=2,
                          swin=SwinConfig(patch=2, window=2, heads=2, embed_dim=8))
        out = model_forward(rng.random((1, 3, 3, 16, 16)), cfg, model_init(cfg))
        assert out.shape == (1, 2, 3, 16, 16)

    @pytest.mark.parametrize("cell", ["vitlstm", "stlstm", "convlstm"])
    def test_zero_params_zero_frames(self, rng, cell):
        cfg = tiny(cell)
        p = {k: Tensor(np.zeros(v.shape)) for k, v in model_init(cfg).items()}
        out = model_forward(rng.random((2, 5, 3, 8, 8)), cfg, p, return_all=True)
        assert out.shape == (2, 4, 3, 8, 8) and np.all(out.data == 0)

    @pytest.mark.parametrize("cell", ["vitlstm", "stlstm", "convlstm"])
    def test_manual_unroll_bit_for_bit(self, rng, cell):
        cfg = tiny(cell)
        p = randomized(cfg, 1)
        frames = rng.random((2, 5, 3, 8, 8)).astype(np.float32)
        assert model_forward(frames, cfg, p).data.tobytes() == manual_unroll(frames, cfg, p).data.tobytes()

    @pytest.mark.parametrize("cell", ["vitlstm", "stlstm"])
    def test_zigzag_memory_bytes(self, rng, cell):
        cfg = tiny(cell, layers=3)
        trace = []
        model_forward(rng.random((1, 5, 3, 8, 8)), cfg, randomized(cfg, 2), trace=trace)
        by = {(r["step"], r["layer"]): r for r in trace}
        assert len(by) == 4 * 3
        assert np.all(by[0, 0]["m_in"] == 0)
        for step in range(4):
            for layer in range(3):
                if layer > 0:
                    src = by[step, layer - 1]["m_out"]
                elif step > 0:
                    src = by[step - 1, 2]["m_out"]
                else:
                    continue
                assert by[step, layer]["m_in"].tobytes() == src.tobytes()

    @pytest.mark.parametrize("cell", ["vitlstm", "convlstm"])
    def test_autoregressive_causality(self, rng, cell):
        cfg = tiny(cell)
        p = randomized(cfg, 3)
        frames = rng.random((1, 5, 3, 8, 8)).astype(np.float32)
        base = model_forward(frames, cfg, p, return_all=True).data
        poked = frames.copy()
        poked[:, 3:] = rng.random(poked[:, 3:].shape)
        assert model_forward(poked, cfg, p, return_all=True).data.tobytes() == base.tobytes()
        # an input frame does matter, and only from its own step on
        poked = frames.copy()
        poked[:, 2] += 0.5
        moved = model_forward(poked, cfg, p, return_all=True).data
        assert moved[:, :2].tobytes() == base[:, :2].tobytes()
        assert not np.array_equal(moved[:, 2:], base[:, 2:])

    def test_accepts_input_only_frames(self, rng):
        cfg = tiny("convlstm")
        p = randomized(cfg, 0)
        frames = rng.random((1, 5, 3, 8, 8)).astype(np.float32)
        a = model_forward(frames, cfg, p).data
        assert model_forward(frames[:, :3], cfg, p).data.tobytes() == a.tobytes()

    def test_train_mode_unclamped(self, rng):
        cfg = tiny("convlstm")
        p = randomized(cfg, 4)
        p["head.b"] = Tensor(np.full(3, 5.0))
        frames = rng.random((1, 5, 3, 8, 8))
        assert model_forward(frames, cfg, p, mode="train").data.min() > 1.0
        assert np.all(model_forward(frames, cfg, p).data == 1.0)

    def test_bad_shapes(self, rng):
        cfg = tiny("convlstm")
        with pytest.raises(DimensionError):
            model_forward(rng.random((1, 2, 3, 8, 8)), cfg, model_init(cfg))
        with pytest.raises(DimensionError):
            model_forward(rng.random((1, 5, 3, 8, 6)), cfg, model_init(cfg))


@pytest.mark.parametrize("cell", ["vitlstm", "stlstm", "convlstm"])
def test_end_to_end_loss_gradients(cell):
    with precision("f64"):
        cfg = tiny(cell, input_len=2, pred_len=2)
        params = randomized(cfg, 7)
        windows = np.random.default_rng(7).random((1, 4, 3, 8, 8))
        names = sorted(params)
        # a representative subset gets perturbed; all gradients are still computed
        chosen = [n for n in names if n.endswith(("embed.w", "qkv.w", "rpb", "fc2.w", "b_o", "b_f", "fuse.w",
                                                  "conv_m.w", "conv.w", "conv.b", "head.w", "head.b"))]
        fixed = {n: params[n] for n in names if n not in chosen}

        def loss(*ps):
            return sequence_loss({**fixed, **dict(zip(chosen, ps))}, cfg, windows)

        err = grad_check(loss, [params[n] for n in chosen], max_coords=2)
    assert err < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny()
        p = randomized(cfg, 0)
        checkpoint_save(tmp_path / "ck", cfg, p, extra={"iteration": 3})
        cfg2, p2, opt, extra = checkpoint_load(tmp_path / "ck")
        assert cfg2 == cfg and opt is None and extra == {"iteration": 3}
        assert all(p[k].data.tobytes() == p2[k].data.tobytes() for k in p)

    def test_mismatch_names_tensor(self, tmp_path):
        cfg = tiny("convlstm")
        checkpoint_save(tmp_path / "ck", cfg, model_init(cfg))
        with pytest.raises(CheckpointError, match="layer0.conv.w"):
            checkpoint_load(tmp_path / "ck", tiny("convlstm", kernel=5))
        with pytest.raises(CheckpointError, match="layer2"):
            checkpoint_load(tmp_path / "ck", tiny("convlstm", layers=3))

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "nothing")
