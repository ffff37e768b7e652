import copy
from pathlib import Path

import pytest
import yaml

from encoderkd.config import init_label, load_config, parse_config
from encoderkd.errors import ConfigInvalid
from encoderkd.initmap import Mode, Strategy
from encoderkd.objectives import Term

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def raw():
    return yaml.safe_load((CONFIGS / "smoke.yaml").read_text())


@pytest.mark.parametrize("name", ["smoke.yaml", "keyword.yaml", "pair_match.yaml"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.cell_list()


def test_smoke_contents(raw):
    cfg = parse_config(raw)
    assert cfg.mode is Mode.TASK_SPECIFIC
    assert (cfg.teacher.arch.num_layers, cfg.student.num_layers) == (2, 1)
    assert cfg.student.hidden_dim == cfg.teacher.arch.hidden_dim  # inherited
    assert [o.label for o in cfg.objectives] == ["HID_SEQ+ATT_MSE", "vanilla-KD"]
    assert [init_label(cfg, i) for i in cfg.inits] == ["2", "1"]
    assert len(cfg.cell_list()) == 4 and cfg.recipe.seeds == (1, 2)


@pytest.mark.parametrize(
    "mutate, fragment",
    [
        (lambda r: r.update(objctive=r.pop("objective")), "objctive"),
        (lambda r: r["recipe"].update(stage1_epoch=2), "recipe.stage1_epoch"),
        (lambda r: r["teacher"].update(num_layer=2), "teacher.num_layer"),
        (lambda r: r["objective"][0].update(temprature=2.0), "objective[0].temprature"),
        (lambda r: r["data"].update(n="many"), "data.n"),
        (lambda r: r["init"][0].update(strategy="EVERY_OTHER"), "EVERY_OTHER"),
        (lambda r: r["objective"][1].update(terms=["PERD"]), "PERD"),
        (lambda r: r.update(mode="SOMETIMES"), "SOMETIMES"),
        (lambda r: r["recipe"].update(seeds=[1, 1]), "duplicates"),
        (lambda r: r["recipe"].update(stage2_epochs=0), "stage2_epochs"),
        (lambda r: r["teacher"].update(num_heads=3), "divisible"),
        (lambda r: r["init"].append({"strategy": "EXPLICIT"}), "init[2].layers"),
        (lambda r: r["init"].append({"strategy": "FIRST_K", "layers": [1]}), "only applies"),
        (lambda r: r["init"].append({"strategy": "EVERY_K"}), "distinct labels"),
        (lambda r: r.update(cells=[["vanilla-KD", "9"]]), "unknown init"),
        (lambda r: r.update(cells=[["nope", "1"]]), "unknown objective"),
        (lambda r: r.update(cells=[["vanilla-KD", "1"], ["vanilla-KD", "1"]]), "duplicate cell"),
        (lambda r: r["data"].update(task="TSV"), "data.train"),
        (lambda r: r.pop("objective"), "objective"),
    ],
)
def test_invalid_configs_name_the_problem(raw, mutate, fragment):
    mutate(raw)
    with pytest.raises(ConfigInvalid) as info:
        parse_config(raw)
    assert fragment in str(info.value)


def test_typo_suggests_the_real_key(raw):
    raw["objctive"] = raw.pop("objective")
    with pytest.raises(ConfigInvalid, match="did you mean 'objective'"):
        parse_config(raw)


def test_random_init_with_intermediate_terms_rejected(raw):
    raw["init"].append({"strategy": "RANDOM_INIT"})
    with pytest.raises(ConfigInvalid, match="RANDOM_INIT"):
        parse_config(raw)


def test_cells_can_exclude_invalid_combinations(raw):
    raw["init"].append({"strategy": "RANDOM_INIT"})
    raw["objective"].append({"name": "no-KD", "terms": ["SUPERVISED"]})
    raw["cells"] = [["no-KD", "random"], ["HID_SEQ+ATT_MSE", "2"]]
    cfg = parse_config(raw)
    assert {(o.label, init_label(cfg, i)) for o, i in cfg.cell_list()} == {("no-KD", "random"), ("HID_SEQ+ATT_MSE", "2")}
    assert not cfg.objectives[2].distills and Term.SUPERVISED in cfg.objectives[2].terms


def test_explicit_layers_validated(raw):
    raw["init"].append({"strategy": "EXPLICIT", "layers": [3]})
    with pytest.raises(ConfigInvalid, match="init\\[2\\]"):
        parse_config(raw)


def test_tsv_paths_resolve_against_config_dir(tmp_path, raw):
    for name in ("train.tsv", "dev.tsv"):
        (tmp_path / name).write_text("sentence\tlabel\na b\t1\nb a\t0\n")
    raw["data"] = {"task": "TSV", "train": "train.tsv", "dev": "dev.tsv"}
    cfg = parse_config(raw, base_dir=tmp_path)
    assert Path(cfg.data.train) == tmp_path / "train.tsv"
    raw["data"]["dev"] = "missing.tsv"
    with pytest.raises(ConfigInvalid, match="does not exist"):
        parse_config(copy.deepcopy(raw), base_dir=tmp_path)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigInvalid, match="not found"):
        load_config(tmp_path / "none.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("mode: [unclosed\n")
    with pytest.raises(ConfigInvalid, match="YAML"):
        load_config(bad)


def test_strategy_enum_parsed(raw):
    cfg = parse_config(raw)
    assert [i.strategy for i in cfg.inits] == [Strategy.EVERY_K, Strategy.FIRST_K]
