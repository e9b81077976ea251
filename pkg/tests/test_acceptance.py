"""Acceptance suite: one test per headline criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 2 and 3 train on a shared synthetic corpus and take a few minutes.
"""
import time

import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from repquant.codec import ArchSpec, build_codec, encode
from repquant.errors import FormatError, UndefinedMetricError
from repquant.featureio import (
    FrameLabels,
    RepresentationSequence,
    read_feature_file,
    read_label_table,
    write_feature_file,
    write_label_file,
    write_manifest,
)
from repquant.metrics import codebook_utilization, distortion_report, ngram_joint_counts, pnmi_n
from repquant.numkernel import make_rng
from repquant.quantizer import (
    Codebook,
    RvqStack,
    TokenSequence,
    distortion,
    ema_update,
    kmeans_fit,
    quantize_vq,
    read_token_file,
    rvq_forward,
    write_token_file,
)
from repquant.synthetic import cluster_centers, cluster_corpus
from repquant.trainer import (
    TrainingConfig,
    fit,
    format_config,
    load_checkpoint,
    loss_log_path,
    parse_config,
    save_checkpoint,
    tokenize,
    tokenize_sequence,
    train,
)

from .gradcheck import codec_fd_error
from .oracles import brute_pnmi

SIGMA = 0.05
DIM = 16
MODES = 8


@pytest.fixture(scope="module")
def cluster_data():
    rng = np.random.default_rng(0)
    centers = cluster_centers(MODES, DIM, rng)
    seqs, labels = cluster_corpus(centers, 2000, 96, SIGMA, rng)
    return seqs, labels


# 1 -------------------------------------------------------------------------


def _tiny_codec(seed):
    rng = np.random.default_rng(seed)
    p = build_codec(ArchSpec(dim=4, clusters=3, rvq_layers=1), make_rng(seed), np.float64)
    for layer in p.layers():
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
    X = rng.standard_normal((8, 4))
    Z = encode(p, X)
    E = Z[rng.choice(8, 3, replace=False)] + 0.05 * rng.standard_normal((3, 4))
    return p, RvqStack([Codebook.from_entries(E)]), X


def test_criterion_1_gradient_oracle(criterion):
    with criterion(1, "codec gradients match finite differences") as c:
        t0 = time.perf_counter()
        errs = [codec_fd_error(*_tiny_codec(seed), 45.0, 1.0) for seed in range(20)]
        elapsed = time.perf_counter() - t0
        c.note(f"20 seeds, max rel err {max(errs):.2e}, {elapsed:.1f}s")
        assert max(errs) < 1e-4
        assert elapsed < 60


# 2 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_clustering_recovery(criterion, cluster_data):
    seqs, labels = cluster_data
    with criterion(2, "clustering recovery on 8-mode synthetic corpus") as c:
        state = fit(seqs, TrainingConfig(clusters=MODES, steps=2000))
        l_r = distortion_report(state, seqs).l_r
        toks = np.stack([tokenize_sequence(state, s.frames).tokens[0] for s in seqs])
        truth = np.stack(labels)
        frac, _ = codebook_utilization(toks, MODES)
        nmi = normalized_mutual_info_score(truth.ravel(), toks.ravel())
        interior = normalized_mutual_info_score(truth[:, 1:-1].ravel(), toks[:, 1:-1].ravel())
        c.note(f"l_r {l_r:.5f} (limit {10 * SIGMA**2:.4f})")
        c.note(f"utilization {frac:.3f}")
        c.note(f"NMI {nmi:.4f}, without first/last frame {interior:.4f}")
        assert l_r <= 10 * SIGMA**2
        assert frac == 1.0
        assert nmi >= 0.99


# 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_objective_parity(criterion, cluster_data):
    seqs, _ = cluster_data
    data = np.concatenate([s.frames for s in seqs]).astype(np.float64)
    pool = (0, 1, 2)
    with criterion(3, "encoderless EMA-VQ distortion matches k-means") as c:
        vq, km = [], []
        for seed in pool:
            cfg = TrainingConfig(clusters=MODES, steps=2000, enc_blocks=0, dec_blocks=0, seed=seed)
            state = fit(seqs, cfg)
            vq.append(distortion(data, state.quantizer.layers[0].entries.astype(np.float64)))
            km.append(kmeans_fit(data, MODES, rng=make_rng(seed, 0))[1])
        best_vq, best_km = min(vq), min(km)
        gap = abs(best_vq - best_km) / best_km
        c.note(f"EMA-VQ {best_vq:.6f}, k-means {best_km:.6f}, gap {gap:.2%}")
        assert gap <= 0.05


# 4 -------------------------------------------------------------------------


def _with_zero(cb):
    return Codebook.from_entries(np.vstack([cb.entries, np.zeros((1, cb.dim), cb.entries.dtype)]))


def test_criterion_4_rvq(criterion, cluster_data):
    seqs, _ = cluster_data
    with criterion(4, "RVQ residual energy and single-layer equivalence") as c:
        state = fit(seqs[:200], TrainingConfig(clusters=MODES, steps=300, enc_blocks=0, dec_blocks=0, rvq_layers=4))
        Z = np.concatenate([s.frames for s in seqs[:500]])
        layers = [_with_zero(cb) for cb in state.quantizer.layers]
        energy = {}
        for m in (1, 2, 4):
            res = rvq_forward(RvqStack(layers[:m]), Z)
            energy[m] = float(np.linalg.norm((Z - res.quantized_sum).astype(np.float64)))
        c.note("energy " + ", ".join(f"M={m}: {e:.4f}" for m, e in energy.items()))
        assert energy[1] >= energy[2] >= energy[4]

        for cb in (layers[0], state.quantizer.layers[0]):
            idx, q, l_q = quantize_vq(cb, Z)
            res = rvq_forward(RvqStack([cb]), Z)
            assert np.array_equal(res.indices[0], idx)
            assert np.array_equal(res.quantized_sum, q)
            assert res.loss == l_q


# 5 -------------------------------------------------------------------------


def test_criterion_5_pnmi_oracle(criterion):
    rng = np.random.default_rng(5)
    with criterion(5, "n-gram PNMI matches brute force, relabeling invariant") as c:
        checked, worst = 0, 0.0
        while checked < 100:
            A, K = int(rng.integers(2, 7)), int(rng.integers(1, 7))
            n_utt = int(rng.integers(1, 4))
            labs = [rng.integers(0, A, int(rng.integers(3, 51))) for _ in range(n_utt)]
            toks = [rng.integers(0, K, lab.shape[0]) for lab in labs]
            perm = rng.permutation(K)
            for n in (1, 2, 3):
                counts = ngram_joint_counts(toks, labs, n)
                try:
                    got = pnmi_n(counts)
                except UndefinedMetricError:
                    continue
                diff = abs(got - brute_pnmi(toks, labs, n))
                worst = max(worst, diff)
                assert diff < 1e-9
                assert pnmi_n(ngram_joint_counts([perm[t] for t in toks], labs, n)) == got
            checked += 1
        c.note(f"100 corpora x n=1..3, worst abs diff {worst:.1e}")


# 6 -------------------------------------------------------------------------


def test_criterion_6_ema(criterion):
    with criterion(6, "EMA codebook updates") as c:
        base = dict(
            entries=np.array([[0.0, 0.0], [10.0, 10.0]]),
            ema_counts=np.array([1.0, 1.0]),
            ema_sums=np.array([[0.0, 0.0], [10.0, 10.0]]),
        )
        Z = np.array([[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]])
        idx = np.array([0, 0, 1])
        expect = {
            0.0: ([2.0, 1.0], [[4.0, 6.0], [9.0, 9.0]], [[2.0, 3.0], [9.0, 9.0]]),
            0.5: ([1.5, 1.0], [[2.0, 3.0], [9.5, 9.5]], [[2.0 / 1.5, 3.0 / 1.5], [9.5, 9.5]]),
            1.0: ([1.0, 1.0], [[0.0, 0.0], [10.0, 10.0]], [[0.0, 0.0], [10.0, 10.0]]),
        }
        for gamma, (counts, sums, entries) in expect.items():
            cb = ema_update(Codebook(**{k: v.copy() for k, v in base.items()}, gamma=gamma), Z, idx)
            np.testing.assert_allclose(cb.ema_counts, counts, rtol=0, atol=1e-12)
            np.testing.assert_allclose(cb.ema_sums, sums, rtol=0, atol=1e-12)
            np.testing.assert_allclose(cb.entries, entries, rtol=0, atol=1e-12)

        rng = np.random.default_rng(6)
        Z = rng.standard_normal((40, 3))
        idx = rng.integers(0, 4, 40)
        means = np.stack([Z[idx == k].mean(0) for k in range(4)])
        init = rng.standard_normal((4, 3)) * 5
        worst = {}
        for gamma in (0.0, 0.5, 0.9):
            cb = Codebook.from_entries(init, gamma=gamma)
            for _ in range(200):
                cb = ema_update(cb, Z, idx)
            worst[gamma] = float(np.abs(cb.entries - means).max())
            assert worst[gamma] < 1e-6
        # the default decay follows its closed form exactly but is still far from the means
        cb = Codebook.from_entries(init, gamma=0.99)
        for _ in range(200):
            cb = ema_update(cb, Z, idx)
        g = 0.99**200
        n = np.bincount(idx, minlength=4)
        sums = np.stack([Z[idx == k].sum(0) for k in range(4)])
        closed = (g * init + (1 - g) * sums) / (g + (1 - g) * n)[:, None]
        np.testing.assert_allclose(cb.entries, closed, rtol=1e-10, atol=1e-12)
        c.note("hand cases exact; 200-step gap " + ", ".join(f"g={k}: {v:.0e}" for k, v in worst.items()))


# 7 -------------------------------------------------------------------------

TINY = dict(batch_size=4, segment_len=12, clusters=4, enc_blocks=1, dec_blocks=1, lr=1e-3, rvq_layers=2)


def _tiny_corpus(root):
    rng = np.random.default_rng(7)
    seqs, labels = cluster_corpus(cluster_centers(4, 3, rng), 24, 30, 0.05, rng, mean_run=5.0)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in seqs:
        write_feature_file(root / f"{s.utterance_id}.rpcf", s)
        paths.append(root / f"{s.utterance_id}.rpcf")
    write_manifest(root / "manifest.txt", [p.name for p in paths])  # relative, so runs compare byte-for-byte
    return seqs, labels, paths


def _pipeline(root):
    _, _, paths = _tiny_corpus(root)
    ck = train(root / "manifest.txt", TrainingConfig(**TINY, steps=25, seed=4), root / "model.rpcc")
    state = load_checkpoint(ck)
    for p in paths:
        tokenize(ck, p, p.with_suffix(".rpct"), state=state)
    return sorted(q.name for q in root.iterdir())


def _truncations_rejected(path, reader):
    raw = path.read_bytes()
    for cut in range(len(raw)):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            reader(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        reader(path)
    path.write_bytes(raw)
    return len(raw)


def test_criterion_7_determinism_and_formats(criterion, tmp_path):
    with criterion(7, "determinism, resume and file formats") as c:
        names = _pipeline(tmp_path / "a")
        assert names == _pipeline(tmp_path / "b")
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        c.note(f"{len(names)} artifacts byte-identical")

        seqs, labels, _ = _tiny_corpus(tmp_path / "r")
        cfg = TrainingConfig(**TINY, steps=110, seed=2)
        save_checkpoint(fit(seqs, cfg), tmp_path / "full.rpcc")
        for j in (1, 10, 100):
            save_checkpoint(fit(seqs, cfg.replace(steps=j)), tmp_path / f"part{j}.rpcc")
            resumed = fit(seqs, cfg, state=load_checkpoint(tmp_path / f"part{j}.rpcc"))
            save_checkpoint(resumed, tmp_path / f"resumed{j}.rpcc")
            assert (tmp_path / f"resumed{j}.rpcc").read_bytes() == (tmp_path / "full.rpcc").read_bytes(), j
        c.note("resume at 1, 10, 100 matches")

        # round trips
        feat = tmp_path / "f.rpcf"
        write_feature_file(feat, seqs[0])
        back = read_feature_file(feat)
        assert back.frames.tobytes() == seqs[0].frames.tobytes()
        write_feature_file(tmp_path / "f2.rpcf", back)
        assert (tmp_path / "f2.rpcf").read_bytes() == feat.read_bytes()

        tok = tmp_path / "t.rpct"
        write_token_file(tok, TokenSequence(np.array([[0, 3, 2], [1, 1, 0]])), 4)
        t, k = read_token_file(tok)
        assert k == 4 and t.tokens.tolist() == [[0, 3, 2], [1, 1, 0]]

        save_checkpoint(load_checkpoint(tmp_path / "full.rpcc"), tmp_path / "again.rpcc")
        assert (tmp_path / "again.rpcc").read_bytes() == (tmp_path / "full.rpcc").read_bytes()

        write_label_file(tmp_path / "l.txt", {s.utterance_id: lab for s, lab in zip(seqs, labels)})
        table = read_label_table(tmp_path / "l.txt", alphabet_size=4)
        assert all(np.array_equal(table[s.utterance_id].labels, lab) for s, lab in zip(seqs, labels))
        write_label_file(tmp_path / "l2.txt", table)
        assert (tmp_path / "l2.txt").read_bytes() == (tmp_path / "l.txt").read_bytes()
        assert isinstance(table[seqs[0].utterance_id], FrameLabels)

        assert parse_config(format_config(cfg)) == cfg

        sizes = [
            _truncations_rejected(feat, read_feature_file),
            _truncations_rejected(tok, read_token_file),
            _truncations_rejected(tmp_path / "full.rpcc", load_checkpoint),
        ]
        c.note(f"every truncation of {sum(sizes)} bytes across 3 binary formats rejected")
        assert loss_log_path(tmp_path / "a" / "model.rpcc").exists()


# 8 -------------------------------------------------------------------------


def test_criterion_8_architecture(criterion):
    with criterion(8, "architecture expansion and parameter counts") as c:
        for dim in (4, 16, 64):
            per_conv = 3 * dim * dim + dim
            reg = build_codec(ArchSpec(dim=dim), make_rng(0))
            big = build_codec(ArchSpec(dim=dim, enc_blocks=8), make_rng(0))
            assert (len(reg.encoder_layers), len(reg.decoder_layers)) == (12, 12)
            assert (len(big.encoder_layers), len(big.decoder_layers)) == (42, 12)
            assert all(layer.size == per_conv for layer in reg.layers() + big.layers())
            assert reg.n_params == 24 * per_conv and big.n_params == 54 * per_conv
        assert ArchSpec(dim=768).n_params == 24 * (3 * 768**2 + 768)
        assert ArchSpec(dim=768, enc_blocks=8).n_params == 54 * (3 * 768**2 + 768)
        c.note("regular 12+12, large 42+12, k*H^2+H per conv")
