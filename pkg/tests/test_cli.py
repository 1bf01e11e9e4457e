"""End-to-end CLI contract: subcommands, manifests, exit codes."""

import json

import numpy as np
import pytest

from ionshuttle.cli import RunManifest, main
from ionshuttle.paperlike import paperlike_trap
from ionshuttle.sideband import synthesize_flop
from ionshuttle.trap import write_trap_model

CHAIN = "Be9,Ca40,Be9"


@pytest.fixture(scope="module")
def trap_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "trap.yaml"
    write_trap_model(paperlike_trap(grid_step=8e-6), path)
    return str(path)


@pytest.fixture(scope="module")
def transport_file(trap_file, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "transport.txt")
    rc = main(["--trap", trap_file, "--out", out, "synth",
               "--kind", "transport", "--chain", CHAIN,
               "--start=-300e-6", "--end=-200e-6", "--duration", "60e-6",
               "--sample-period", "0.9e-6"])
    assert rc == 0
    return out


def test_synth_writes_waveform_and_manifest(transport_file, trap_file):
    from ionshuttle.synth import Waveform
    wf = Waveform.load(transport_file)
    assert wf.n_samples == 68
    doc = json.load(open(transport_file + ".manifest.json"))
    assert doc["command"] == "synth"
    assert trap_file in doc["inputs"]
    assert doc["version"]
    assert RunManifest.verify(transport_file + ".manifest.json")


def test_validate_accepts_synthesized(transport_file, trap_file, capsys):
    rc = main(["--trap", trap_file, "--out", "/dev/null", "validate",
               "--waveform", transport_file])
    assert rc == 0
    assert "OK" in capsys.readouterr().out


def test_modes_output_format(transport_file, trap_file, tmp_path):
    out = str(tmp_path / "modes.txt")
    rc = main(["--trap", trap_file, "--out", out, "modes",
               "--waveform", transport_file, "--chain", CHAIN,
               "--stride", "32"])
    assert rc == 0
    lines = [ln for ln in open(out) if not ln.startswith("#")]
    assert len(lines) == 3 * 9   # 3 strided samples x 9 modes
    t, label, freq, *parts = lines[0].split()
    assert label[0] in "XYZ"
    assert 1e5 < float(freq) < 1e7
    assert len(parts) == 3
    assert abs(sum(float(p) for p in parts) - 1.0) < 1e-3


def test_simulate_reruns_byte_identically(transport_file, trap_file, tmp_path):
    out1 = str(tmp_path / "a.txt")
    out2 = str(tmp_path / "b.txt")
    args = ["--trap", trap_file, "synth"]
    for out in (out1, out2):
        rc = main(["--trap", trap_file, "--out", out, "simulate",
                   "--waveform", transport_file, "--chain", CHAIN,
                   "--heating", "1.2e3:1e6"])
        assert rc == 0
    assert open(out1).read() == open(out2).read()
    body = open(out1).read()
    assert " Z1 coherent " in body and " Z1 total " in body


def test_fit_command(tmp_path, capsys):
    rng = np.random.default_rng(42)
    t = np.linspace(0.0, 800e-6, 80)
    ds = synthesize_flop(rng, t, 1.4, 0.0, 2.0 * np.pi * 1e5, 300.0,
                         0.06, 250)
    data = str(tmp_path / "flop.csv")
    ds.save(data)
    out = str(tmp_path / "fit.txt")
    rc = main(["--out", out, "fit", "--dataset", data])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "nbar" in printed and "+-" in printed
    fitted = dict(ln.split(None, 1) for ln in open(out)
                  if not ln.startswith("cov"))
    assert float(fitted["n_thermal"]) == pytest.approx(1.4, abs=0.2)


def test_usage_errors_exit_2(trap_file):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--trap", trap_file, "synth", "--kind", "teleport",
              "--chain", CHAIN, "--duration", "1e-6"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:   # missing --out
        main(["--trap", trap_file, "modes", "--chain", CHAIN])
    assert exc.value.code == 2


def test_domain_errors_exit_1(trap_file, tmp_path, capsys):
    rc = main(["--trap", "/nonexistent.yaml", "--out",
               str(tmp_path / "x.txt"), "validate", "--waveform", "w.txt"])
    assert rc == 1
    assert "error" in capsys.readouterr().err
    # slew-violating waveform (36 V/us >> 2 V/us limit)
    bad = tmp_path / "bad.txt"
    from ionshuttle.synth import Waveform
    samples = np.zeros((3, 10))
    samples[1] = 9.0
    Waveform(0.25e-6, tuple(f"E{k+1}" for k in range(10)), samples,
             []).save(bad)
    rc = main(["--trap", trap_file, "--out", str(tmp_path / "y.txt"),
               "validate", "--waveform", str(bad)])
    assert rc == 1


def test_manifest_verify_detects_tampering(transport_file, trap_file,
                                           tmp_path):
    out = str(tmp_path / "modes.txt")
    rc = main(["--trap", trap_file, "--out", out, "modes",
               "--waveform", transport_file, "--chain", "Ca40",
               "--stride", "64"])
    assert rc == 0
    manifest = out + ".manifest.json"
    assert RunManifest.verify(manifest)
    with open(transport_file, "a") as f:
        f.write("# tampered\n")
    assert not RunManifest.verify(manifest)
