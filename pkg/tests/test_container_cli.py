"""Container format, run-config schema, and CLI surface tests."""

import json
import struct

import numpy as np
import pytest

from skd import model, persist, runconfig, synthdata
from skd.cli import main
from skd.container import (MAGIC, VERSION, Container, read_container,
                           write_container)
from skd.errors import ConfigError, IntegrityError, ParseError


@pytest.fixture
def sample_container():
    rng = np.random.default_rng(7)
    return Container(
        kind="dataset",
        meta={"generator": {"dataset": "oscillators"}, "seed": 7, "note": "x"},
        arrays={"a": rng.normal(size=(3, 4, 2)), "b": rng.normal(size=(5,)),
                "empty": np.zeros((0, 3))},
    )


# -- container format --------------------------------------------------------

def test_round_trip_bytes_identical(tmp_path, sample_container):
    p1, p2 = tmp_path / "c1.skd", tmp_path / "c2.skd"
    write_container(str(p1), sample_container)
    write_container(str(p2), read_container(str(p1)))
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_preserves_content(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    back = read_container(str(p))
    assert back.kind == "dataset"
    assert back.meta["seed"] == 7
    for name, arr in sample_container.arrays.items():
        np.testing.assert_array_equal(back.arrays[name], arr)


def test_layout_prefix(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    blob = p.read_bytes()
    assert blob[:4] == MAGIC == b"SKD1"
    assert struct.unpack_from("<I", blob, 4)[0] == VERSION
    hlen = struct.unpack_from("<I", blob, 8)[0]
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    assert header["kind"] == "dataset"
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["arrays"])
    assert len(blob) == 12 + hlen + 8 * total


def test_flipped_magic_byte_rejected(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    blob = bytearray(p.read_bytes())
    blob[0] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ParseError, match="magic"):
        read_container(str(p))


def test_version_mismatch_rejected(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    blob = bytearray(p.read_bytes())
    struct.pack_into("<I", blob, 4, VERSION + 1)
    p.write_bytes(bytes(blob))
    with pytest.raises(ParseError, match="version"):
        read_container(str(p))


def test_truncated_payload_is_integrity_error(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    blob = p.read_bytes()
    p.write_bytes(blob[:-9])
    with pytest.raises(IntegrityError, match="truncated"):
        read_container(str(p))


def test_trailing_bytes_are_integrity_error(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    p.write_bytes(p.read_bytes() + b"\x00" * 4)
    with pytest.raises(IntegrityError, match="trailing"):
        read_container(str(p))


def test_corrupt_json_header_names_offset(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    blob = bytearray(p.read_bytes())
    blob[12] = ord("!")
    p.write_bytes(bytes(blob))
    with pytest.raises(ParseError, match="byte 12"):
        read_container(str(p))


def test_short_file_rejected(tmp_path):
    p = tmp_path / "c.skd"
    p.write_bytes(b"SKD1\x01")
    with pytest.raises(ParseError, match="short"):
        read_container(str(p))


def test_dataset_adapter_round_trip(tmp_path):
    cfg = synthdata.GeneratorConfig(dataset="oscillators", n_train=12, n_test=8,
                                    t=8, obs_dim=10, speakers=3, contents=2, seed=5)
    train, test = synthdata.generate(cfg)
    p = tmp_path / "d.skd"
    write_container(str(p), persist.dataset_to_container(train, test, cfg))
    tr2, te2, cfg2 = persist.dataset_from_container(read_container(str(p)))
    assert cfg2 == cfg
    np.testing.assert_array_equal(tr2.frames, train.frames)
    np.testing.assert_array_equal(te2.labels["speaker"], test.labels["speaker"])
    assert tr2.factor_roles == train.factor_roles
    assert tr2.channels == train.channels
    assert tr2.value_range == train.value_range


def test_wrong_kind_rejected(tmp_path, sample_container):
    p = tmp_path / "c.skd"
    write_container(str(p), sample_container)
    with pytest.raises(ParseError, match="checkpoint"):
        persist.checkpoint_from_container(read_container(str(p)))


# -- run config schema --------------------------------------------------------

def test_run_config_defaults_applied():
    rc = runconfig.build_run_config({"generator": {"dataset": "toy-sprites"}})
    m = rc.model
    assert (m.k, m.k_s, m.eps) == (40, 8, 0.5)
    assert (m.lambda_rec, m.lambda_pred, m.lambda_eig) == (15.0, 1.0, 1.0)
    assert m.lr == 1e-3
    assert m.m == 3 * 12 * 12


def test_unknown_key_names_section_and_key():
    with pytest.raises(ConfigError, match=r"model\.learning_rate"):
        runconfig.build_run_config({"model": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError, match=r"generator\.gird"):
        runconfig.build_run_config({"generator": {"gird": 8}})


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="trainer"):
        runconfig.build_run_config({"trainer": {}})


def test_bad_type_rejected():
    with pytest.raises(ConfigError, match=r"model\.epochs"):
        runconfig.build_run_config({"model": {"epochs": "ten"}})


def test_out_of_range_value_rejected():
    with pytest.raises(ConfigError):
        runconfig.build_run_config({"eval": {"protocol": "fix-everything"}})


def test_invalid_json_is_parse_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ParseError, match="JSON"):
        runconfig.load_run_config(str(p))


def test_model_config_meta_round_trip():
    cfg = model.ModelConfig(m=12, k=6, k_s=2, hidden=(16, 8), epochs=3)
    assert runconfig.model_config_from_meta(runconfig.model_config_to_meta(cfg)) == cfg


# -- CLI ----------------------------------------------------------------------

SMALL_CONFIG = {
    "generator": {"dataset": "oscillators", "seed": 3, "n_train": 60, "n_test": 24,
                  "t": 8, "obs_dim": 12, "speakers": 4, "contents": 3},
    "model": {"k": 10, "k_s": 4, "hidden": [32], "epochs": 3, "seed": 1},
    "eval": {"protocol": "fix-static-sample-dynamic", "sample_epochs": 4, "seed": 0},
}


@pytest.fixture
def cli_dir(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    return tmp_path


def test_cli_gen_deterministic(cli_dir):
    d1, d2 = cli_dir / "d1.skd", cli_dir / "d2.skd"
    cfg = str(cli_dir / "config.json")
    assert main(["gen", "--config", cfg, "--out", str(d1)]) == 0
    assert main(["gen", "--config", cfg, "--out", str(d2)]) == 0
    assert d1.read_bytes() == d2.read_bytes()


def test_cli_pipeline_and_loss_csv(cli_dir):
    cfg = str(cli_dir / "config.json")
    data, ckpt = str(cli_dir / "d.skd"), str(cli_dir / "m.skd")
    log = cli_dir / "losses.csv"
    assert main(["gen", "--config", cfg, "--out", data]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", ckpt,
                 "--log", str(log)]) == 0
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,L,L_rec,L_pred,L_stat,L_dyn"
    assert len(lines) == 1 + SMALL_CONFIG["model"]["epochs"]
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert int(cells[0]) == i
        assert all(np.isfinite(float(c)) for c in cells[1:])

    metrics_path = cli_dir / "metrics.json"
    assert main(["eval", "--ckpt", ckpt, "--data", data,
                 "--protocol", "fix-static-sample-dynamic",
                 "--sample-epochs", "4", "--json", str(metrics_path)]) == 0
    report = json.loads(metrics_path.read_text())
    assert set(report) == {"acc", "is", "h_y_given_x", "h_y",
                           "eer_static", "eer_dynamic", "mean", "std"}


def test_cli_spectrum_contract(cli_dir):
    cfg = str(cli_dir / "config.json")
    data, ckpt = str(cli_dir / "d.skd"), str(cli_dir / "m.skd")
    assert main(["gen", "--config", cfg, "--out", data]) == 0
    # untrained (random-init) checkpoint: epochs=0
    doc = dict(SMALL_CONFIG, model=dict(SMALL_CONFIG["model"], epochs=0))
    cfg0 = cli_dir / "config0.json"
    cfg0.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg0), "--data", data, "--out", ckpt]) == 0

    csv_path = cli_dir / "spec.csv"
    assert main(["spectrum", "--ckpt", ckpt, "--data", data,
                 "--csv", str(csv_path)]) == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "index,re,im,modulus,dist_to_one,partition"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == SMALL_CONFIG["model"]["k"]
    lam = np.array([complex(float(r[1]), float(r[2])) for r in rows])
    # complex eigenvalues of a real matrix come in conjugate pairs
    np.testing.assert_allclose(np.sort_complex(lam), np.sort_complex(lam.conj()),
                               atol=1e-12)
    for r in rows:
        assert r[5] in ("static", "dynamic")
        np.testing.assert_allclose(float(r[3]), abs(lam[int(r[0])]), atol=1e-12)


def test_cli_swap_sample_identify(cli_dir):
    cfg = str(cli_dir / "config.json")
    data, ckpt = str(cli_dir / "d.skd"), str(cli_dir / "m.skd")
    assert main(["gen", "--config", cfg, "--out", data]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", ckpt]) == 0

    swap_out = cli_dir / "swap.skd"
    assert main(["swap", "--ckpt", ckpt, "--data", data, "--src", "0",
                 "--tgt", "1", "--factors", "static", "--out", str(swap_out)]) == 0
    c = read_container(str(swap_out))
    assert c.meta["swap"]["factors"] == ["static"]
    assert c.arrays["test_frames"].shape[0] == SMALL_CONFIG["generator"]["n_test"]

    gen_out = cli_dir / "gen.skd"
    assert main(["sample", "--ckpt", ckpt, "--data", data, "--subspace", "dynamic",
                 "--seed", "5", "--out", str(gen_out)]) == 0
    assert read_container(str(gen_out)).meta["sample"]["subspace"] == "dynamic"

    sub_json = cli_dir / "subspace.json"
    assert main(["identify", "--ckpt", ckpt, "--data", data, "--factor", "speaker",
                 "--json", str(sub_json)]) == 0
    report = json.loads(sub_json.read_text())
    assert report["factor"] == "speaker"
    assert report["identified"] in (True, False)


def test_cli_reloaded_checkpoint_evaluates_identically(cli_dir):
    cfg_doc = SMALL_CONFIG
    gen_cfg = runconfig.build_run_config(cfg_doc).generator
    train_b, test_b = synthdata.generate(gen_cfg)
    ckpt = model.train(runconfig.build_run_config(cfg_doc).model, train_b.frames)

    p = cli_dir / "m.skd"
    write_container(str(p), persist.checkpoint_to_container(ckpt))
    back = persist.checkpoint_from_container(read_container(str(p)))
    z1 = model.encode_eval(ckpt, test_b.frames).z.value
    z2 = model.encode_eval(back, test_b.frames).z.value
    np.testing.assert_array_equal(z1, z2)
    assert back.loss_history == ckpt.loss_history


def test_cli_unknown_config_key_exit_2(cli_dir, capsys):
    bad = cli_dir / "bad.json"
    bad.write_text(json.dumps({"model": {"leraning_rate": 0.1}}))
    rc = main(["gen", "--config", str(bad), "--out", str(cli_dir / "d.skd")])
    assert rc == 2
    assert "model.leraning_rate" in capsys.readouterr().err


def test_cli_missing_file_exit_2(cli_dir, capsys):
    rc = main(["train", "--config", str(cli_dir / "config.json"),
               "--data", str(cli_dir / "nope.skd"), "--out", str(cli_dir / "m.skd")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_cli_corrupt_data_exit_3_with_dump(cli_dir, capsys, monkeypatch):
    monkeypatch.chdir(cli_dir)
    cfg = str(cli_dir / "config.json")
    data = cli_dir / "d.skd"
    assert main(["gen", "--config", cfg, "--out", str(data)]) == 0
    data.write_bytes(data.read_bytes()[:-16])
    rc = main(["train", "--config", cfg, "--data", str(data),
               "--out", str(cli_dir / "m.skd")])
    assert rc == 3
    err = capsys.readouterr().err
    assert "numeric failure" in err
    assert (cli_dir / "skd_spectrum_dump.txt").exists()


def test_cli_model_dim_mismatch_exit_2(cli_dir, capsys):
    cfg = str(cli_dir / "config.json")
    data = str(cli_dir / "d.skd")
    assert main(["gen", "--config", cfg, "--out", data]) == 0
    other = dict(SMALL_CONFIG,
                 generator=dict(SMALL_CONFIG["generator"], obs_dim=16))
    cfg2 = cli_dir / "config2.json"
    cfg2.write_text(json.dumps(other))
    rc = main(["train", "--config", str(cfg2), "--data", data,
               "--out", str(cli_dir / "m.skd")])
    assert rc == 2
    assert "model.m" in capsys.readouterr().err
