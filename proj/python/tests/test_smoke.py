import json
import random
from pathlib import Path

import pytest

import mtlforge as mf

FIXTURES = Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def brute_macro_f1(preds, golds, labels):
    total = 0.0
    for c in labels:
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        fp = sum(p == c and g != c for p, g in zip(preds, golds))
        fn = sum(p != c and g == c for p, g in zip(preds, golds))
        total += 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return total / len(labels)


def test_version_and_data_dir():
    assert mf.__version__ == "0.1.0"
    assert (mf.data_dir() / "lexicon.tsv").is_file()
    assert (mf.data_dir() / "tasks.json").is_file()


def test_preprocess_goldens():
    pre = mf.default_preprocessor(masks=True, emoji=True, hashtags=False)
    lines = (FIXTURES / "preprocess_goldens.tsv").read_text(encoding="utf-8").splitlines()
    assert lines
    for line in lines:
        raw, expected = line.split("\t")
        assert pre(raw) == expected


def test_mask_normalization_idempotent():
    cfg = mf.NormConfig()
    for text in ["@john see https://x.co/a", "<user> <url>", "[USER] [URL]", "HTTPURL @USER"]:
        once = mf.normalize_masks(text, cfg)
        assert mf.normalize_masks(once, cfg) == once
    with pytest.raises(mf.ConfigError):
        mf.NormConfig(user_token="")


def test_hashtag_segmentation():
    lex = mf.Lexicon.load(mf.data_dir() / "lexicon.tsv")
    assert mf.segment_word("metoo", lex) == ["me", "too"]


def test_macro_f1_matches_brute_force():
    rng = random.Random(5)
    for _ in range(200):
        k = rng.randint(2, 6)
        labels = [f"c{i}" for i in range(k)]
        n = rng.randint(1, 40)
        golds = [rng.choice(labels) for _ in range(n)]
        preds = [rng.choice(labels) for _ in range(n)]
        r = mf.macro_f1(preds, golds, labels)
        assert abs(r["macro_f1"] - brute_macro_f1(preds, golds, labels)) < 1e-12
        assert sum(c["support"] for c in r["per_class"]) == n


def test_convergence_rule():
    assert mf.check_convergence([3, 2, 2, 2, 2, 2, 2])
    assert not mf.check_convergence([3, 2, 2, 2, 2, 2])
    assert not mf.check_convergence([5, 4, 4, 4, 4, 4, 3.9])


def test_schedule_batches_are_single_task_and_cover_everything():
    sizes = [7, 3, 12]
    schedule = mf.build_mtl_schedule(sizes, 4, seed=3)
    seen = sorted((t, i) for t, idx in schedule for i in idx)
    assert seen == sorted((t, i) for t, n in enumerate(sizes) for i in range(n))
    assert all(0 < len(idx) <= 4 for _, idx in schedule)


def test_mask_tokens_never_touches_specials():
    ids = [2] + list(range(5, 40)) + [3, 0, 0]
    mask = [1] * 37 + [0, 0]
    inp, labels, stats = mf.mask_tokens(ids, mask, vocab_size=50, mask_prob=0.5, seed=1)
    assert stats["eligible"] == 35
    assert labels[0] == labels[36] == labels[37] == -100
    assert inp[0] == 2 and inp[36] == 3


def keyword_task(name, words, n, seed):
    rng = random.Random(seed)
    filler = ["the", "a", "today", "really", "some", "very", "just", "again"]
    texts, labels = [], []
    for i in range(n):
        lab = i % 2
        body = [rng.choice(filler) for _ in range(3)]
        body.insert(rng.randint(0, 3), words[lab])
        texts.append(" ".join(body))
        labels.append(["neg", "pos"][lab])
    return mf.TaskDataset(name, ["neg", "pos"], texts, labels)


def test_model_train_save_load_roundtrip(tmp_path):
    sent = keyword_task("sent", ["awful", "great"], 24, 1)
    topic = keyword_task("topic", ["cats", "dogs"], 24, 2)
    vocab = mf.Vocab.build(sent.texts + topic.texts)
    cfg = mf.EncoderConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=12)
    model = mf.Model.create(cfg, seed=4)
    model.add_head("sent", ["neg", "pos"], 4)
    model.add_head("topic", ["neg", "pos"], 4)
    assert model.parameter_count() == mf.expected_parameter_count(cfg, model.heads)

    out = mf.train_mtl(model, [sent, topic], vocab, lr=1e-3, epochs=60, batch_size=4, dev_fraction=0.0,
                       target_aggregate=1.0, seed=4)
    assert out["report"]["best_aggregate"] == 1.0
    trained = out["model"]
    assert mf.evaluate(trained, sent, vocab)["macro_f1"] == 1.0

    path = tmp_path / "m.ckpt"
    trained.save(path)
    loaded = mf.Model.load(path)
    assert loaded.predict("sent", sent.texts, vocab) == trained.predict("sent", sent.texts, vocab)
    for name in trained.parameter_names():
        assert loaded.parameter(name) == trained.parameter(name)

    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(mf.CheckpointError, match="mlm.bias"):
        mf.Model.load(path)


def test_cli_entry_point(tmp_path):
    preds = FIXTURES / "cli" / "predictions.jsonl"
    code, out, err = mf.run_cli(["evaluate", "--predictions", str(preds), "--out", str(tmp_path)])
    assert code == 0, err
    run_dir = Path(out.strip().splitlines()[-1].split(": ", 1)[1])
    scores = json.loads((run_dir / "scores.json").read_text())
    rows = [json.loads(l) for l in preds.read_text().splitlines()]
    labels = sorted({r["gold"] for r in rows} | {r["pred"] for r in rows})
    expected = brute_macro_f1([r["pred"] for r in rows], [r["gold"] for r in rows], labels)
    assert abs(scores["scores"][0]["value"] - expected) < 1e-12
    assert mf.run_cli(["evaluate", "--nope"])[0] == 64
