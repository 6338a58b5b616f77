import pytest

from handlers.config_reader import ConfigReader
from handlers.errors import EXIT_CHECKSUM, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, ChecksumMismatchError, ConfigError, \
    DataError, NumericError, RunLockedError, ShapeError
from handlers.retry_logic import retry_with_exponential_backoff


def test_exit_codes_follow_the_hierarchy():
    assert ConfigError("x").exit_code == EXIT_CONFIG
    assert RunLockedError("x").exit_code == EXIT_CONFIG
    assert ShapeError("x").exit_code == EXIT_DATA
    assert NumericError("x", epoch=1, batch=2).exit_code == EXIT_NUMERIC
    assert ChecksumMismatchError("f", "a", "b").exit_code == EXIT_CHECKSUM
    assert isinstance(ShapeError("x"), ValueError)


def test_retry_backs_off_then_succeeds():
    sleeps, attempts = [], []

    @retry_with_exponential_backoff(retry_on=(RunLockedError,), initial_delay=0.1, jitter=0.0,
                                    sleep=sleeps.append)
    def flaky():
        attempts.append(1)
        if len(attempts) < 3:
            raise RunLockedError("busy")
        return "ok"

    assert flaky() == "ok"
    assert sleeps == pytest.approx([0.1, 0.2])


def test_retry_gives_up_and_ignores_other_errors():
    sleeps = []

    @retry_with_exponential_backoff(retry_on=(RunLockedError,), max_retries=2, jitter=0.0, sleep=sleeps.append)
    def always_locked():
        raise RunLockedError("busy")

    with pytest.raises(RunLockedError):
        always_locked()
    assert len(sleeps) == 2

    @retry_with_exponential_backoff(retry_on=(RunLockedError,), sleep=sleeps.append)
    def broken():
        raise DataError("bad")

    with pytest.raises(DataError):
        broken()
    assert len(sleeps) == 2


def test_read_flat_rejects_tables(tmp_path):
    path = tmp_path / "nested.toml"
    path.write_text('epochs = 3\n[probe]\nepochs = 2\n', encoding="utf-8")
    with pytest.raises(ConfigError, match="probe"):
        ConfigReader().read_flat(path)


def test_read_flat_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ConfigReader().read_flat(tmp_path / "missing.toml")
    path = tmp_path / "broken.toml"
    path.write_text("epochs = = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        ConfigReader().read_flat(path)


def test_read_flat_environment_values(tmp_path, monkeypatch):
    path = tmp_path / "run.toml"
    path.write_text('epochs = 3\nworkdir = "w"\n', encoding="utf-8")
    monkeypatch.setenv("CBT_WORKDIR", "elsewhere")
    monkeypatch.setenv("CBT_FRACTIONS", "[0.5, 1.0]")
    doc = ConfigReader().read_flat(path)
    assert doc == {"epochs": 3, "workdir": "elsewhere"}


def test_nested_lookup_from_the_app_config(tmp_path, monkeypatch):
    (tmp_path / "dev.toml").write_text('[logger]\nlevel = "debug"\n', encoding="utf-8")
    monkeypatch.delenv("APP_ENV", raising=False)
    monkeypatch.delenv("CBT_LOGGER_LEVEL", raising=False)
    conf = ConfigReader(config_dir=tmp_path).read_config()
    assert conf.get("logger.level") == "debug"
    assert conf.get("logger.file", "fallback.log") == "fallback.log"
    monkeypatch.setenv("CBT_LOGGER_LEVEL", "warning")
    assert conf.get("logger.level") == "warning"
