"""CLI behavior: generation, templating, scene vectors, exit codes."""

import numpy as np
import pytest

from fixture_gen.cli import main, scene_vec_main
from fixture_gen.pipeline import load_names, templated_names

from promptfocus.embeddings import load_fixture
from promptfocus.selection import DcpConfig, select_prompts


def write_names(tmp_path, names, fname="names.txt"):
    p = tmp_path / fname
    p.write_text("\n".join(names) + "\n", encoding="utf-8")
    return p


def test_three_name_list_loads_clean(tmp_path, capsys):
    names = write_names(tmp_path, ["harbor", "tugboat", "buoy"])
    rc = main(["--names", str(names), "--out", str(tmp_path / "tiny")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "tiny.embt" in out and "tiny.json" in out
    lib, table = load_fixture(tmp_path / "tiny.embt")
    assert lib.names == ("harbor", "tugboat", "buoy")
    assert table.rows.shape == (3, 64)


def test_reruns_are_byte_identical(tmp_path):
    names = write_names(tmp_path, ["fork", "spoon", "ladle", "whisk"])
    assert main(["--names", str(names), "--out", str(tmp_path / "a")]) == 0
    assert main(["--names", str(names), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a.embt").read_bytes() == (tmp_path / "b.embt").read_bytes()
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_template_changes_embeddings_but_not_names(tmp_path):
    names = write_names(tmp_path, ["osprey", "heron"])
    assert main(["--names", str(names), "--out", str(tmp_path / "plain"),
                 "--template", "{}"]) == 0
    assert main(["--names", str(names), "--out", str(tmp_path / "photo")]) == 0
    lib_p, table_p = load_fixture(tmp_path / "plain.embt")
    lib_t, table_t = load_fixture(tmp_path / "photo.embt")
    assert lib_p.names == lib_t.names == ("osprey", "heron")
    assert table_p.rows.tobytes() != table_t.rows.tobytes()


def test_duplicates_dropped_after_templating(tmp_path):
    names = write_names(tmp_path, ["Car", "car", "CAR ", "bus"])
    assert main(["--names", str(names), "--out", str(tmp_path / "dd")]) == 0
    lib, table = load_fixture(tmp_path / "dd.embt")
    # first spelling wins
    assert lib.names == ("Car", "bus")
    assert len(table) == 2


def test_templated_names_dedupes_case_insensitively():
    pairs = templated_names(["Tram", "tram", "metro"], "a photo of a {}")
    assert [raw for raw, _ in pairs] == ["Tram", "metro"]
    assert pairs[0][1] == "a photo of a Tram"


def test_missing_names_file_exits_2(tmp_path, capsys):
    rc = main(["--names", str(tmp_path / "absent.txt"),
               "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "cannot read" in capsys.readouterr().err


def test_empty_names_file_exits_2(tmp_path, capsys):
    p = tmp_path / "blank.txt"
    p.write_text("\n  \n\n", encoding="utf-8")
    rc = main(["--names", str(p), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "no names" in capsys.readouterr().err


def test_unknown_encoder_exits_2(tmp_path, capsys):
    names = write_names(tmp_path, ["gull"])
    rc = main(["--names", str(names), "--out", str(tmp_path / "x"),
               "--encoder", "resnet50"])
    assert rc == 2
    assert "unknown encoder" in capsys.readouterr().err


def test_template_without_placeholder_exits_2(tmp_path, capsys):
    names = write_names(tmp_path, ["gull"])
    rc = main(["--names", str(names), "--out", str(tmp_path / "x"),
               "--template", "a photo"])
    assert rc == 2
    assert "placeholder" in capsys.readouterr().err


def test_missing_required_args_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_scene_vec_feeds_prompt_selection(tmp_path, capsys):
    # raw {} template on both sides: the templated space works for the
    # cosine-ordering checks, but its shared-prefix mass squeezes all
    # pairwise distances under the default cluster threshold
    classes = ["road", "sky", "car", "person", "minibus", "minivan",
               "vegetation", "building"]
    names = write_names(tmp_path, classes)
    assert main(["--names", str(names), "--out", str(tmp_path / "lib"),
                 "--template", "{}"]) == 0
    rc = scene_vec_main(["--classes", "minibus,road,sky", "--template", "{}",
                         "--out", str(tmp_path / "scene.vec")])
    assert rc == 0
    vec = np.loadtxt(tmp_path / "scene.vec")
    assert vec.shape == (64,)
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    lib, table = load_fixture(tmp_path / "lib.embt")
    sel = select_prompts(vec, lib, table, DcpConfig(temperature=0.2))
    assert "road" in sel.cls and "sky" in sel.cls
    # member classes score above the absent unrelated ones
    sims = {n: float(table.row_of(n) @ vec) for n in classes}
    assert min(sims["road"], sims["sky"]) > sims["vegetation"]


def test_scene_vec_rerun_is_byte_identical(tmp_path):
    for name in ("v1.vec", "v2.vec"):
        assert scene_vec_main(["--classes", "car,road",
                               "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "v1.vec").read_bytes() == (tmp_path / "v2.vec").read_bytes()


def test_scene_vec_blank_classes_exit_2(tmp_path, capsys):
    rc = scene_vec_main(["--classes", " , ", "--out", str(tmp_path / "v.vec")])
    assert rc == 2
    assert "at least one" in capsys.readouterr().err


def test_load_names_strips_and_skips_blanks(tmp_path):
    p = tmp_path / "n.txt"
    p.write_text("  alpha  \n\nbeta\n   \ngamma\n", encoding="utf-8")
    assert load_names(p) == ["alpha", "beta", "gamma"]
