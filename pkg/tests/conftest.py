import numpy as np
import pytest
from hypothesis import settings

from fedalign.encoder import EncoderConfig, build_encoder
from fedalign.numerics import Rng
from fedalign.objectives import local_loss

settings.register_profile("fedalign", max_examples=60, deadline=None)
settings.load_profile("fedalign")


def tiny_encoder(seed, d_in=8, d_hidden=8, d_embed=8, num_blocks=3, rank=2, lora_start=0,
                 activation="tanh", hidden_gain=None, randomize_b=True):
    kw = {} if hidden_gain is None else {"hidden_gain": hidden_gain}
    cfg = EncoderConfig(num_blocks=num_blocks, d_in=d_in, d_hidden=d_hidden, d_embed=d_embed,
                        activation=activation, lora_start=lora_start, rank=rank, **kw)
    root = Rng(seed)
    enc = build_encoder(cfg, root.split("backbone"), root.split("lora"))
    if randomize_b:
        brng = root.split("b")
        for i in cfg.adapted:
            enc.blocks[i].lora.b[...] = brng.normal(0.0, 0.3, size=enc.blocks[i].lora.b.shape)
        enc.touch()
    return enc


def unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def numeric_grads(loss_fn, enc, eps=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of enc.params()."""
    out = []
    for p in enc.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            enc.touch()
            up = loss_fn()
            p[idx] = old - eps
            enc.touch()
            down = loss_fn()
            p[idx] = old
            enc.touch()
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def local_objective_instance(seed, batch=6, num_classes=3, mu=0.1, **enc_kw):
    """Random encoder, batch and text features for gradient checks."""
    from fedalign.objectives import ObjectiveConfig

    enc = tiny_encoder(seed, **enc_kw)
    rng = Rng(seed).split("batch")
    x = rng.normal(size=(batch, enc.config.d_in))
    y = np.arange(batch) % num_classes
    text = unit_rows(rng, num_classes, enc.config.d_embed)
    cfg = ObjectiveConfig(tau=2.66, mu=mu)
    return enc, x, y, text, cfg


@pytest.fixture
def fd_loss():
    def make(enc, x, y, text, cfg):
        return lambda: local_loss(x, y, enc, text, cfg)
    return make
