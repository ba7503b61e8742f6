"""Preloaded query library (one .dl rule file per topic)."""

from importlib import resources

from ..datalog import Rule, parse_rules


def load_core_rules() -> list[Rule]:
    text = resources.files(__package__).joinpath("core.dl").read_text()
    return parse_rules(text)


def load_rule_directory(path) -> list[Rule]:
    """Every *.dl file in a directory, sorted by name."""
    from pathlib import Path

    rules: list[Rule] = []
    for file in sorted(Path(path).glob("*.dl")):
        rules.extend(parse_rules(file.read_text()))
    return rules
