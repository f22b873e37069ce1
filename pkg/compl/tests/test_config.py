import compl.config
from compl.config import ValidationError, make_train_config, parse_config
import shutil
import pytest
import os


@pytest.fixture
def datadir(tmpdir, request):
    '''
    Pull fixture from directory with the same file name as module
    https://stackoverflow.com/questions/29627341/pytest-where-to-store-expected-data
    '''

    filename = request.module.__file__
    test_dir, _ = os.path.splitext(filename)

    if os.path.isdir(test_dir):
        shutil.copytree(test_dir, str(tmpdir), dirs_exist_ok=True)

    return tmpdir


def test_config_fails_when_environment_variable_missing(datadir, monkeypatch):
    '''
    Test whether when environment variables are defined in the input
    specification but not in the calling environment that a ValidationError
    will be raised
    '''

    monkeypatch.delenv("COMPL_TEST_UNDEFINED", raising=False)
    spec = datadir.join("only-environment-fixture.yml")
    with pytest.raises(ValidationError):
        parse_config(spec)


def test_config_substitutes_env_when_variable_available(datadir, monkeypatch):
    '''
    Test whether environment variables are substituted into both the
    env block and training fields
    '''

    monkeypatch.setenv("COMPL_TEST_NAME", "/scratch")
    monkeypatch.setenv("COMPL_TEST_SEED", "7")
    spec = parse_config(datadir.join("env-substitution.yml"))
    assert spec.env == {"OUT": "/scratch/results"}
    assert spec.train.seed == 7


def test_defaults_resolve_from_aux_method():
    assert make_train_config({"mode": "joint", "aux": "rot"}).lam == 0.05
    assert make_train_config({"mode": "joint", "aux": "moco"}).lam == 0.2
    config = make_train_config({"target_tasks": "depth"})
    assert config.crop_offset == 2
    assert config.batch_aux == config.batch_target
    assert config.effective_lambda == 0.0


def test_seed_defaults_to_environment(monkeypatch):
    monkeypatch.setenv(compl.config.SEED_ENV, "42")
    assert make_train_config({}).seed == 42
    monkeypatch.delenv(compl.config.SEED_ENV)
    assert make_train_config({}).seed == 1


def test_overrides_take_precedence_over_file(datadir):
    spec = parse_config(datadir.join("depth-lowlabel.yml"),
                        overrides={
                            "base_lr": "0.02",
                            "max-iters": "10"
                        })
    assert spec.train.base_lr == 0.02
    assert spec.train.max_iters == 10
    assert spec.train.aux == "moco"


def test_file_takes_precedence_over_defaults(datadir):
    spec = parse_config(datadir.join("depth-lowlabel.yml"))
    assert spec.name == "depth-lowlabel"
    assert spec.train.base_lr == 0.05
    assert spec.train.mode == "joint"
    assert spec.eval_domains == ("in_domain", "shifted")


def test_name_argument_overrides_file(datadir):
    spec = parse_config(datadir.join("depth-lowlabel.yml"), name="rerun")
    assert spec.name == "rerun"


def test_sweep_expands_deduplicated_axes(datadir):
    cells = parse_config(datadir.join("depth-lowlabel.yml")).cells()
    assert [(c.labeled_fraction, c.seed) for c in cells] == [(0.1, 1),
                                                             (0.1, 2),
                                                             (0.5, 1),
                                                             (0.5, 2)]


def test_lambda_grid_keyword(datadir):
    spec = parse_config(datadir.join("lambda-grid.yml"))
    assert [c.lam for c in spec.cells()] == list(compl.config.LAMBDA_GRID)
    assert spec.train.target_tasks == ("semseg", )


def test_equivalent_cells_collapse(datadir):
    cells = parse_config(datadir.join("collapsing-cells.yml")).cells()
    assert [(c.mode, c.aux) for c in cells] == [("baseline", "none"),
                                                ("joint", "moco")]
    assert cells[1].lam == 0.3


def test_base_aux_applies_to_swept_modes(datadir):
    spec = parse_config(datadir.join("swept-modes.yml"))
    cells = spec.cells()
    assert [c.mode for c in cells] == [
        "joint", "pretrain_finetune", "pretrain_joint"
    ]
    assert {c.aux for c in cells} == {"densecl"}
    assert spec.train == cells[0]


def test_unswept_baseline_with_aux_is_rejected(datadir):
    with pytest.raises(ValidationError) as e:
        parse_config(datadir.join("baseline-with-aux.yml"))
    assert e.value.field == "aux"


def test_negative_lambda_is_rejected(datadir):
    with pytest.raises(ValidationError) as e:
        parse_config(datadir.join("negative-lambda.yml"))
    assert e.value.field == "lam"


def test_unknown_training_field(datadir):
    with pytest.raises(ValidationError) as e:
        parse_config(datadir.join("unknown-key.yml"))
    assert e.value.field == "max_iter"


def test_unknown_top_level_key(datadir):
    with pytest.raises(ValidationError):
        parse_config(datadir.join("unknown-top-level.yml"))


@pytest.mark.parametrize("values,field", [
    ({"mode": "pretrain_joint"}, "aux"),
    ({"mode": "baseline", "aux": "moco"}, "aux"),
    ({"mode": "multitask", "target_tasks": ["depth"]}, "target_tasks"),
    ({"target_tasks": []}, "target_tasks"),
    ({"target_tasks": ["normals"]}, "target_tasks"),
    ({"batch_target": 4, "batch_aux": 2}, "batch_aux"),
    ({"image_size": 16}, "crop_size"),
    ({"crop_size": 2, "image_size": 8}, "grid"),
    ({"max_iters": "many"}, "max_iters"),
    ({"momentum": 1.0}, "momentum"),
    ({"labeled_fraction": 0.0}, "labeled_fraction"),
])
def test_invalid_train_values(values, field):
    with pytest.raises(ValidationError) as e:
        make_train_config(values)
    assert e.value.field == field


def test_to_dict_is_complete():
    config = make_train_config({"tasks": "depth,semseg",
                                "mode": "multitask"})
    d = config.to_dict()
    assert d["target_tasks"] == ["depth", "semseg"]
    assert make_train_config(d) == config


SPEC_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "specs")


@pytest.mark.skipif(not os.path.isdir(SPEC_DIR),
                    reason="example specifications not available")
@pytest.mark.parametrize("spec_name", [
    "depth_lowlabel.yml", "lambda_grid.yml", "schedules.yml",
    "zero_shot.yml", "multitask.yml"
])
def test_example_specifications_parse(spec_name, monkeypatch):
    monkeypatch.setenv("HOME", "/home/user")
    spec = parse_config(os.path.join(SPEC_DIR, spec_name))
    assert spec.cells()
