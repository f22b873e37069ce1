import io

import pytest

import compl.autodiff as ad
import compl.gradcheck as gradcheck


def test_every_registered_op_has_a_check():
    assert set(ad.view_ops()) <= set(gradcheck.view_checks())


def test_suite_passes():
    report = gradcheck.run_gradchecks(trials=2)
    assert report.ok, report.failures
    assert not report.missing
    assert {r.component for r in report.results} >= {"densecl", "info_nce"}


def test_report_names_every_component():
    out = io.StringIO()
    assert gradcheck.gradcheck_cmd(out, ["relu", "conv2d"], trials=1) == 0
    lines = out.getvalue().splitlines()
    assert lines[0] == "component\tworst_rel_error\tstatus"
    assert [line.split("\t")[0] for line in lines[1:]] == ["relu", "conv2d"]
    assert all(line.endswith("ok") for line in lines[1:])


def test_wrong_backward_fails_the_suite(monkeypatch):
    relu = ad.view_ops()["relu"]
    monkeypatch.setattr(relu, "backward",
                        staticmethod(lambda ctx, grad: (3.0 * grad, )))
    out = io.StringIO()
    assert gradcheck.gradcheck_cmd(out, ["relu", "exp"], trials=2) == 1
    assert "relu\t" in out.getvalue() and "FAIL" in out.getvalue()
    report = gradcheck.run_gradchecks(["relu", "exp"], trials=2)
    assert report.failures == ["relu"]


def test_op_without_check_is_reported(monkeypatch):
    ops = dict(ad.view_ops())
    ops["unchecked"] = object
    monkeypatch.setattr(gradcheck, "view_ops", lambda: ops)
    report = gradcheck.run_gradchecks(trials=1)
    assert report.missing == ["unchecked"]
    assert not report.ok
    out = io.StringIO()
    report.write(out)
    assert "unchecked\tnan\tNO CHECK" in out.getvalue()


def test_unknown_component():
    with pytest.raises(KeyError):
        gradcheck.run_gradchecks(["softmax"], trials=1)


def test_raising_backward_is_a_failure(monkeypatch):
    def broken(ctx, grad):
        raise ValueError("operands could not be broadcast together")

    relu = ad.view_ops()["relu"]
    monkeypatch.setattr(relu, "backward", staticmethod(broken))
    out = io.StringIO()
    assert gradcheck.gradcheck_cmd(out, ["relu", "exp"], trials=1) == 1
    lines = out.getvalue().splitlines()
    assert lines[1] == "relu\tinf\tFAIL"
    assert lines[2].startswith("exp\t") and lines[2].endswith("ok")
