import pytest

from src import app
from src.utils.exceptions import NoSupportError


@pytest.mark.parametrize("flag", ["--target-height", "--target_height"])
def test_detect_accepts_both_flag_spellings(flag):
    args = app.build_parser().parse_args(["detect", "--input", "in", "--output", "out", flag, "20"])

    assert args.target_height == "20"
    assert args.input_dir == "in"


def test_debug_patches_is_a_switch():
    args = app.build_parser().parse_args(["detect", "--debug-patches"])

    assert args.debug_patches == "true"


def test_synth_command_writes_a_set(tmp_path):
    # 1. Arrange
    argv = ["synth", "--preset", "static-control", "--output", str(tmp_path),
            "--width", "96", "--height", "72", "--seed", "2"]

    # 2. Act
    code = app.main(argv)

    # 3. Assert
    assert code == app.EXIT_OK
    assert (tmp_path / "view_00.png").is_file()
    assert (tmp_path / "gt" / "view_03.png").is_file()
    assert (tmp_path / "fmatrices.json").is_file()


def test_no_support_exits_with_code_two(mocker, capsys):
    # 1. Arrange
    mocker.patch(
        "src.controllers.processing_controller.ProcessingController.run",
        side_effect=NoSupportError("No image pair has accepted epipolar geometry.",
                                   {("a", "b"): "too few matches"}),
    )

    # 2. Act
    code = app.main(["detect", "--input", "in", "--output", "out"])

    # 3. Assert
    assert code == app.EXIT_NO_SUPPORT
    assert "a -> b: too few matches" in capsys.readouterr().err


def test_missing_directories_exit_with_an_error(capsys):
    code = app.main(["detect", "--output", "out"])

    assert code == app.EXIT_ERROR
    assert "input directory" in capsys.readouterr().err


def test_bad_config_file_exits_with_an_error(tmp_path, capsys):
    config_file = tmp_path / "run.env"
    config_file.write_text("colour=red\n")

    code = app.main(["detect", "--input", "in", "--output", "out", "--config", str(config_file)])

    assert code == app.EXIT_ERROR
    assert "colour" in capsys.readouterr().err
