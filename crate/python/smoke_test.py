"""Smoke test for the rangepose_py extension: simulate, estimate, evaluate."""

import math

import rangepose_py as rp


def main():
    xi = [0.1, -0.2, 0.3, 0.05, -0.02, 0.4]
    pose = rp.Pose.exp(xi)
    assert max(abs(a - b) for a, b in zip(pose.log(), xi)) < 1e-12
    ident = pose.compose(pose.inverse())
    assert max(abs(v) for v in ident.log()) < 1e-12
    assert len(pose.matrix()) == 4

    sc = rp.Scenario.arena(3, lever=0.5, noise_std=0.05)
    sc.duration = 10.0
    sc.seed = 3
    sim = sc.simulate()
    meas = sim.measurements
    assert len(meas) > 50, len(meas)

    res = rp.estimate(sc.problem_config(), meas, mode="batch")
    assert res.status == "Converged", res.status
    est = res.estimates
    truth = sim.truth([s.t for s in est])
    report = rp.evaluate(est, truth)
    print(f"batch: {len(est)} knots, pos rmse {report.position_rmse:.4f} m, "
          f"ori rmse {report.orientation_rmse:.4f} rad, coverage {report.coverage}")
    assert report.position_rmse < 0.2
    assert len(est[0].covariance) == 12

    fls = rp.estimate(sc.problem_config(), meas, mode="fls")
    assert len(fls.estimates) == len(meas) - fls.rejected
    assert len(fls.smoothed) > 0
    q = fls.estimates[-1].orientation
    assert abs(math.fsum(v * v for v in q) - 1.0) < 1e-9

    try:
        rp.estimate("{}", meas)
    except ValueError as e:
        print(f"bad config rejected: {e}")
    else:
        raise AssertionError("empty config accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
