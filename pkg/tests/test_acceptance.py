"""Exit criteria, one test group per criterion, each at its stated tolerance."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from attnfer.activations import mean_activation
from attnfer.attention import AttentionConfig, CBAMBlock, ECABlock, SEBlock, attention_param_count, build_attention
from attnfer.cli import main, parse_params_table, resolve_config, spec_from_config, train_config_from, load_dataset
from attnfer.data import load_fer2013_csv, preprocess, write_fer2013_csv
from attnfer.errors import ParseError
from attnfer.gradcheck import LINEAR_TOL, NONLINEAR_TOL, run_suite
from attnfer.models import ModelSpec, build_model, init_params
from attnfer.rng import Stream
from attnfer.train import evaluate, fit

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "tests" / "data" / "fer2013_10rows.csv"
TOY = ROOT / "configs" / "toy_se.cfg"


def criterion(n, title):
    return pytest.mark.acceptance((n, title))


# 1 -------------------------------------------------------------------------

PARAM_ROWS = [
    (["--family", "resnet", "--depth", "50", "--attention", "none"], 23.49),
    (["--family", "vgg", "--depth", "16", "--attention", "none"], 39.92),
    (["--family", "resnet", "--depth", "50", "--attention", "se", "--r", "16"], 26.02),
    (["--family", "resnet", "--depth", "50", "--attention", "cbam", "--r", "16"], 26.02),
]


@criterion(1, "parameter counts within 1% of reference values, <10 s")
def test_param_counts(capsys):
    start = time.perf_counter()
    counts = []
    for flags, expect in PARAM_ROWS:
        code = main(["params", *flags, "--expect", str(expect), "--tol", "1"])
        out, err = capsys.readouterr()
        counts.append((flags, expect, code, err, parse_params_table(out)[0]["params"]))
    elapsed = time.perf_counter() - start
    for flags, expect, code, err, n in counts:
        print(f"{' '.join(flags)}: {n} vs {expect}M ({100 * (n / (expect * 1e6) - 1):+.3f}%)")
        assert code == 0, err
        assert abs(n - expect * 1e6) <= 0.01 * expect * 1e6
    assert elapsed < 10


# 2 -------------------------------------------------------------------------


@criterion(2, "adaptive ECA kernel table (3,5,5,5,5,7)")
def test_eca_table(capsys):
    assert main(["eca-table", "64", "128", "256", "512", "1024", "2048"]) == 0
    rows = [ln.split("\t") for ln in capsys.readouterr().out.splitlines()[1:]]
    assert [int(k) for _, k in rows] == [3, 5, 5, 5, 5, 7]


# 3 -------------------------------------------------------------------------


@criterion(3, "layer and attention gradients certified on 5 seeds; injected fault caught, <2 min")
def test_gradient_certification(capsys):
    start = time.perf_counter()
    for scope in ("layers", "attention"):
        for seed in range(5):
            assert main(["gradcheck", scope, "--seed", str(seed)]) == 0, capsys.readouterr().out
            capsys.readouterr()
            for name, report in run_suite(scope, seed=seed, seeds=1, max_coords=50):
                assert report.tolerance <= NONLINEAR_TOL, name
                assert report.passed and report.max_rel_err <= report.tolerance, f"{name}: {report.summary()}"
        assert main(["gradcheck", scope, "--inject-fault", "1.01", "--seeds", "1"]) == 1
        capsys.readouterr()
    linear = {name for name, r in run_suite("layers", seeds=1, max_coords=10) if r.tolerance == LINEAR_TOL}
    assert {"conv3x3_same", "conv3x3_stride2", "conv1x1_stride2", "dense", "global_avg_pool", "flatten"} <= linear
    assert time.perf_counter() - start < 120


# 4 -------------------------------------------------------------------------


@criterion(4, "zero-parameter gates scale by 0.5 (CBAM 0.25) within 1e-12")
@pytest.mark.parametrize(
    "block, factor",
    [
        (SEBlock(32, AttentionConfig("se", r=4)), 0.5),
        (ECABlock(32, AttentionConfig("eca")), 0.5),
        (CBAMBlock(32, AttentionConfig("cbam", r=4)), 0.25),
    ],
    ids=["se", "eca", "cbam"],
)
def test_degenerate_gates(block, factor):
    for p in block.parameters():
        assert not p.value.any()
    x = Stream(4, 0).normal(2 * 32 * 7 * 7).reshape(2, 32, 7, 7) * 3
    assert np.max(np.abs(block.forward(x) - factor * x)) <= 1e-12


# 5 -------------------------------------------------------------------------


@criterion(5, "closed-form attention parameter count equals allocated scalars, 12 random configs")
def test_param_count_identity():
    st = Stream(5, 0)
    kinds = ("se", "eca", "cbam")
    for i in range(12):
        u = st.uniform(4)
        kind = kinds[i % 3]
        r = int(1 + u[0] * 16)
        c = r * int(1 + u[1] * 64)
        k = None if u[2] < 0.5 else 2 * int((u[2] - 0.5) * 8) + 1
        if k is not None and k > 2 * c - 1:
            k = None
        s = (1, 3, 5, 7)[int(u[3] * 4)]
        cfg = AttentionConfig(kind, r=r, eca_fixed_k=k, spatial_kernel=s)
        allocated = sum(p.size for p in build_attention(cfg, c).parameters())
        assert attention_param_count(kind, c, cfg) == allocated, (kind, c, r, k, s)


# 6 -------------------------------------------------------------------------


def _train_toy(kind):
    cfg = resolve_config(TOY, [f"attention={kind}"])
    spec = spec_from_config(cfg)
    tcfg = train_config_from(cfg)
    data = load_dataset(cfg, spec, "train")
    model = build_model(spec)
    init_params(model, tcfg.seed)
    initial = evaluate(model, data).loss
    fit(model, data, tcfg)
    final = evaluate(model, data)
    blob = b"".join(p.value.tobytes() for p in model.parameters())
    return len(data), initial, final, blob


@criterion(6, "toy training: >=95% train accuracy, loss /10, deterministic; all four attention kinds, <5 min")
def test_sanity_training():
    start = time.perf_counter()
    for kind in ("none", "se", "eca", "cbam"):
        n, initial, final, blob = _train_toy(kind)
        print(f"{kind}: n={n} loss {initial:.4f} -> {final.loss:.2e} acc {final.accuracy:.3f}")
        assert n == 70
        assert final.accuracy >= 0.95
        assert final.loss < initial / 10
        assert _train_toy(kind)[3] == blob
    assert time.perf_counter() - start < 300


# 7 -------------------------------------------------------------------------


@criterion(7, "ELU mean activation nearer zero than ReLU on 1e5 normal samples")
def test_bias_shift():
    z = Stream(7, 0).normal(100_000)
    relu, elu = mean_activation("relu", z), mean_activation("elu", z)
    assert abs(elu) < abs(relu)
    assert abs(relu - 1 / math.sqrt(2 * math.pi)) <= 0.01
    assert abs(relu - 0.3989) <= 0.01
    assert abs(elu - 0.1606) <= 0.01


# 8 -------------------------------------------------------------------------


@criterion(8, "FER2013 round-trip bit-exact, malformed row indexed, preprocess idempotent")
def test_data_contracts(tmp_path):
    batch = load_fer2013_csv(FIXTURE)
    assert len(batch) == 10
    out = tmp_path / "rt.csv"
    usages = [ln.rsplit(",", 1)[1] for ln in FIXTURE.read_text().splitlines()[1:]]
    write_fer2013_csv(batch, out, usages)
    again = load_fer2013_csv(out)
    assert again.images.tobytes() == batch.images.tobytes() and again.labels.tobytes() == batch.labels.tobytes()

    lines = FIXTURE.read_text().splitlines()
    label, pixels, usage = lines[7].split(",")
    lines[7] = ",".join([label, " ".join(pixels.split()[:-1]), usage])
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_fer2013_csv(bad)
    assert info.value.row == 7

    once = preprocess(batch.images, (80, 80), 3)
    assert preprocess(once, (80, 80), 3).tobytes() == once.tobytes()


# 9 -------------------------------------------------------------------------


@criterion(9, "train twice with the same config and seed: bitwise-identical checkpoints")
def test_train_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--config", str(TOY), "--epochs", "10", "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "run0" / "model.ckpt").read_bytes()
    assert a == (tmp_path / "b" / "run0" / "model.ckpt").read_bytes()


# 10 ------------------------------------------------------------------------

BACKBONES = [("vgg", 16), ("vgg", 19)] + [(f, d) for f in ("resnet", "resnetv2") for d in (50, 101, 152)]


@criterion(10, "smoke matrix: every backbone x attention gives finite (2,7) logits")
@pytest.mark.slow
@pytest.mark.parametrize("kind", ["none", "se", "eca", "cbam"])
@pytest.mark.parametrize("family, depth", BACKBONES, ids=[f"{f}{d}" for f, d in BACKBONES])
def test_smoke_matrix(family, depth, kind):
    model = build_model(ModelSpec(family=family, depth=depth, attention=AttentionConfig(kind, r=16)))
    init_params(model, 0)
    x = Stream(10, 0).uniform(2 * 3 * 80 * 80).reshape(2, 3, 80, 80)
    logits = model.forward(x, "infer")
    assert logits.shape == (2, 7) and np.all(np.isfinite(logits))
