//! Small adaptive Dormand-Prince 5(4) integrator for low-dimensional ODE
//! systems. Used by the oracle paths (homogeneous solutions, the canonical
//! family) and deliberately disjoint from the PDE stepper.

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction) with
/// local error control, returning `y(t1)`.
pub fn integrate<F>(f: F, t0: f64, y0: &[f64], t1: f64, rtol: f64, atol: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let mut y = y0.to_vec();
    let mut t = t0;
    if t1 == t0 {
        return y;
    }
    let dir = (t1 - t0).signum();
    let mut h = dir * (0.01 * (t1 - t0).abs()).max(1e-8);
    let mut k1 = f(t, &y);

    let step = |t: f64, y: &[f64], h: f64, k1: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let n = y.len();
        let lin = |coeffs: &[(f64, &Vec<f64>)]| -> Vec<f64> {
            (0..n)
                .map(|i| y[i] + h * coeffs.iter().map(|(c, k)| c * k[i]).sum::<f64>())
                .collect()
        };
        let k1v = k1.to_vec();
        let k2 = f(t + h / 5.0, &lin(&[(1.0 / 5.0, &k1v)]));
        let k3 = f(t + 3.0 * h / 10.0, &lin(&[(3.0 / 40.0, &k1v), (9.0 / 40.0, &k2)]));
        let k4 = f(
            t + 4.0 * h / 5.0,
            &lin(&[(44.0 / 45.0, &k1v), (-56.0 / 15.0, &k2), (32.0 / 9.0, &k3)]),
        );
        let k5 = f(
            t + 8.0 * h / 9.0,
            &lin(&[
                (19372.0 / 6561.0, &k1v),
                (-25360.0 / 2187.0, &k2),
                (64448.0 / 6561.0, &k3),
                (-212.0 / 729.0, &k4),
            ]),
        );
        let k6 = f(
            t + h,
            &lin(&[
                (9017.0 / 3168.0, &k1v),
                (-355.0 / 33.0, &k2),
                (46732.0 / 5247.0, &k3),
                (49.0 / 176.0, &k4),
                (-5103.0 / 18656.0, &k5),
            ]),
        );
        let y5 = lin(&[
            (35.0 / 384.0, &k1v),
            (500.0 / 1113.0, &k3),
            (125.0 / 192.0, &k4),
            (-2187.0 / 6784.0, &k5),
            (11.0 / 84.0, &k6),
        ]);
        let k7 = f(t + h, &y5);
        let y4 = lin(&[
            (5179.0 / 57600.0, &k1v),
            (7571.0 / 16695.0, &k3),
            (393.0 / 640.0, &k4),
            (-92097.0 / 339200.0, &k5),
            (187.0 / 2100.0, &k6),
            (1.0 / 40.0, &k7),
        ]);
        let err = (0..n)
            .map(|i| {
                let sc = atol + rtol * y5[i].abs().max(y[i].abs());
                ((y5[i] - y4[i]) / sc).powi(2)
            })
            .sum::<f64>()
            .sqrt()
            / (n as f64).sqrt();
        (y5, k7, err)
    };

    let mut guard = 0usize;
    while (t1 - t) * dir > 0.0 {
        guard += 1;
        assert!(guard < 10_000_000, "ODE integrator failed to advance");
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }
        let (y5, k7, err) = step(t, &y, h, &k1);
        if err <= 1.0 {
            t += h;
            y = y5;
            k1 = k7;
            let grow = if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
            h *= grow;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    y
}

/// Sample `y(t)` at each requested time (strictly monotone sequence).
pub fn integrate_path<F>(
    f: F,
    t0: f64,
    y0: &[f64],
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Vec<Vec<f64>>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Copy,
{
    let mut out = Vec::with_capacity(times.len());
    let mut y = y0.to_vec();
    let mut t = t0;
    for &tk in times {
        y = integrate(f, t, &y, tk, rtol, atol);
        t = tk;
        out.push(y.clone());
    }
    out
}
