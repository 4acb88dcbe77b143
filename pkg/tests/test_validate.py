import pytest

from sbmsep.validate import MODULES, VALIDATORS, run_validators


def test_every_module_has_validators():
    assert tuple(VALIDATORS) == MODULES


@pytest.mark.parametrize("module", MODULES)
def test_module_validators_pass_at_small_size(module):
    checks = run_validators(module, size=0.01, seed=11)
    assert checks and all(c.module == module for c in checks)
    failed = [c.line() for c in checks if not c.passed]
    assert not failed, failed


def test_unknown_module_rejected():
    with pytest.raises(KeyError):
        run_validators("nosuchmodule")
