"""Bundled .d4 sources for the sorting and addition tasks."""

from importlib import resources

from ..compiler import compile_source

NAMES = (
    "bubble_sort", "sort_reference", "sort_compare", "sort_permute",
    "add_reference", "add_choose", "add_manipulate", "wap_scaffold",
    "halt_only",
)


def source(name: str) -> str:
    if name not in NAMES:
        raise KeyError("unknown bundled program %r" % name)
    return resources.files(__package__).joinpath(name + ".d4").read_text()


def load(name: str):
    """Compile a bundled program."""
    return compile_source(source(name))
