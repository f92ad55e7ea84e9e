"""
Tests for verify_setup.py
Self-check script run from the repository root
"""

from pathlib import Path

import pytest

import verify_setup


@pytest.fixture
def repo_root(monkeypatch):
    monkeypatch.chdir(Path(__file__).resolve().parent)


class TestVerifySetup:
    """Tests for the individual checks"""

    def test_dependencies_present(self):
        ok, missing = verify_setup.check_dependencies()
        assert ok
        assert missing == []

    def test_required_files(self, repo_root):
        ok, missing = verify_setup.check_files()
        assert ok, missing

    def test_missing_files_reported(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        ok, missing = verify_setup.check_files()
        assert not ok
        assert "spfa_cli.py" in missing

    def test_config(self):
        assert verify_setup.check_config()

    def test_numerical_smoke_checks(self):
        assert verify_setup.check_spfa_fit()
        assert verify_setup.check_rotation()

    def test_main_summary(self, repo_root, capsys):
        assert verify_setup.main() in (0, 1)
        output = capsys.readouterr().out
        assert "VERIFICATION SUMMARY" in output
        assert "checks passed" in output

    def test_readme_names_the_model(self, repo_root):
        text = Path("README.md").read_text(encoding="utf-8")
        assert "Score Predictor Factor Analysis (SPFA)" in text
