//! Prediction-error constants and the state/input tightening coefficients.

use std::io::Write;

use crate::constants::SystemConstants;
use crate::error::{Error, Result};

/// `c_alpha[k] = rho_k dbar_{N-L} + dbar_{N-L+k}`, `c_sigma[k] = rho_k + 1`, `k = 0..=L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionErrorConstants {
    pub c_alpha: Vec<f64>,
    pub c_sigma: Vec<f64>,
}

pub fn prediction_error_constants(
    consts: &SystemConstants,
    horizon: usize,
    data_len: usize,
) -> Result<PredictionErrorConstants> {
    if data_len < horizon {
        return Err(Error::Precondition(format!("N = {data_len} is shorter than L = {horizon}")));
    }
    if consts.dbar.len() < data_len + 1 || consts.rho.len() < horizon + 1 {
        return Err(Error::Precondition(format!(
            "need dbar up to index {data_len} and rho up to {horizon}; have {} and {}",
            consts.dbar.len().saturating_sub(1),
            consts.rho.len().saturating_sub(1)
        )));
    }
    let base = data_len - horizon;
    let c_alpha = (0..=horizon)
        .map(|k| consts.rho[k] * consts.dbar[base] + consts.dbar[base + k])
        .collect();
    let c_sigma = (0..=horizon).map(|k| consts.rho[k] + 1.0).collect();
    Ok(PredictionErrorConstants { c_alpha, c_sigma })
}

/// Coefficients of the tightened constraints, indexed `k = 0..L-1`:
/// `||x_k|| + a_u ||nu||_1 + a_alpha ||alpha||_1 + a_sigma ||sigma_k|| + a_c <= x_max`
/// and the input analogue with `b_*`.
#[derive(Clone, Debug, PartialEq)]
pub struct TighteningCoefficients {
    pub a_u: Vec<f64>,
    pub a_alpha: Vec<f64>,
    pub a_sigma: Vec<f64>,
    pub a_c: Vec<f64>,
    pub b_u: Vec<f64>,
    pub b_alpha: Vec<f64>,
    pub b_sigma: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl TighteningCoefficients {
    pub fn horizon(&self) -> usize {
        self.a_u.len()
    }

    /// Columns `k, a_u, a_alpha, a_sigma, a_c, b_u, b_alpha, b_sigma, b_c`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        wr.write_record(["k", "a_u", "a_alpha", "a_sigma", "a_c", "b_u", "b_alpha", "b_sigma", "b_c"])
            .map_err(err)?;
        for k in 0..self.horizon() {
            let row = [
                self.a_u[k],
                self.a_alpha[k],
                self.a_sigma[k],
                self.a_c[k],
                self.b_u[k],
                self.b_alpha[k],
                self.b_sigma[k],
                self.b_c[k],
            ];
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            wr.write_record(&rec).map_err(err)?;
        }
        wr.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    /// Named columns, for plotting.
    pub fn families(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("a_u", &self.a_u),
            ("a_alpha", &self.a_alpha),
            ("a_sigma", &self.a_sigma),
            ("a_c", &self.a_c),
            ("b_u", &self.b_u),
            ("b_alpha", &self.b_alpha),
            ("b_sigma", &self.b_sigma),
            ("b_c", &self.b_c),
        ]
    }
}

/// Base case for `k < n`, then the `n`-step recursion up to `L - 1`.
pub fn sf_coefficients(
    pec: &PredictionErrorConstants,
    consts: &SystemConstants,
    horizon: usize,
    order: usize,
    data_len: usize,
    x_max: f64,
) -> Result<TighteningCoefficients> {
    if horizon < order {
        return Err(Error::Horizon { horizon, order });
    }
    if pec.c_alpha.len() < horizon + 1 || pec.c_sigma.len() < horizon + 1 {
        return Err(Error::Precondition("prediction-error constants shorter than L + 1".into()));
    }
    if data_len < 1 || consts.dbar.len() < data_len.max(order + 1) {
        return Err(Error::Precondition(format!(
            "need dbar up to index max(N - 1, n) = {}",
            data_len.saturating_sub(1).max(order)
        )));
    }
    let kb = consts.k_bar;
    let dn = consts.dbar[order];
    let dn1 = consts.dbar[data_len - 1];
    let c_pe = consts.c_pe;
    let gamma = consts.gamma;
    let spread = order as f64 * x_max + order as f64 * dn;
    let (ca_end, cs_end) = (pec.c_alpha[horizon - 1], pec.c_sigma[horizon - 1]);

    let mut t = TighteningCoefficients {
        a_u: vec![0.0; horizon],
        a_alpha: vec![0.0; horizon],
        a_sigma: vec![0.0; horizon],
        a_c: vec![0.0; horizon],
        b_u: vec![0.0; horizon],
        b_alpha: vec![0.0; horizon],
        b_sigma: vec![0.0; horizon],
        b_c: vec![0.0; horizon],
    };
    for k in 0..order.min(horizon) {
        t.a_alpha[k] = pec.c_alpha[k];
        t.a_sigma[k] = pec.c_sigma[k];
        t.a_c[k] = consts.dbar[k];
        t.b_alpha[k] = kb * pec.c_alpha[k];
        t.b_sigma[k] = kb * pec.c_sigma[k];
        t.b_c[k] = kb * consts.dbar[k];
    }
    for k in 0..horizon - order {
        let j = k + order;
        t.a_u[j] = t.a_u[k] + t.a_alpha[k] * c_pe + t.a_sigma[k] * c_pe * dn1;
        t.a_alpha[j] = t.a_u[j] * gamma * ca_end + pec.c_alpha[j];
        t.a_sigma[j] = t.a_u[j] * gamma * cs_end + pec.c_sigma[j];
        t.a_c[j] = t.a_c[k]
            + t.a_alpha[k] * c_pe * spread
            + t.a_sigma[k] * (dn1 * c_pe * spread + dn)
            + dn;
        t.b_u[j] = t.b_u[k] + t.b_alpha[k] * c_pe + t.b_sigma[k] * c_pe * dn1;
        t.b_alpha[j] = t.b_u[j] * gamma * ca_end + kb * pec.c_alpha[j];
        t.b_sigma[j] = t.b_u[j] * gamma * cs_end + kb * pec.c_sigma[j];
        t.b_c[j] = t.b_c[k]
            + t.b_alpha[k] * c_pe * spread
            + t.b_sigma[k] * (dn1 * c_pe * spread + dn)
            + kb * dn;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts(rho: Vec<f64>, w: f64, c_pe: f64, gamma: f64, kb: f64) -> SystemConstants {
        SystemConstants::from_rho(rho, w, c_pe, gamma, kb).unwrap()
    }

    fn geometric(r: f64, len: usize) -> Vec<f64> {
        (0..len).map(|k| r.powi(k as i32)).collect()
    }

    #[test]
    fn pec_examples() {
        let c = consts(geometric(0.5, 21), 1e-3, 0.2, 0.7, 1.0);
        let p = prediction_error_constants(&c, 5, 20).unwrap();
        assert_eq!(p.c_sigma[0], 2.0);
        assert_eq!(p.c_alpha.len(), 6);
        assert!((p.c_alpha[2] - (0.25 * c.dbar[15] + c.dbar[17])).abs() < 1e-15);

        let z = consts(geometric(0.5, 21), 0.0, 0.2, 0.7, 1.0);
        let p0 = prediction_error_constants(&z, 5, 20).unwrap();
        assert!(p0.c_alpha.iter().all(|v| *v == 0.0));

        assert!(prediction_error_constants(&c, 5, 21).is_err());
    }

    #[test]
    fn zero_noise_leaves_sigma_terms() {
        let c = consts(geometric(0.9, 31), 0.0, 0.3, 0.5, 0.0);
        let p = prediction_error_constants(&c, 12, 30).unwrap();
        let t = sf_coefficients(&p, &c, 12, 4, 30, 10.0).unwrap();
        for v in [&t.a_alpha, &t.a_c, &t.b_u, &t.b_alpha, &t.b_sigma, &t.b_c, &t.a_u] {
            assert!(v.iter().all(|x| *x == 0.0));
        }
        for k in 0..12 {
            assert_eq!(t.a_sigma[k], p.c_sigma[k]);
        }
    }

    #[test]
    fn base_case() {
        let c = consts(geometric(0.8, 51), 1e-3, 0.2, 0.7, 2.5);
        let p = prediction_error_constants(&c, 12, 50).unwrap();
        let t = sf_coefficients(&p, &c, 12, 4, 50, 10.0).unwrap();
        for k in 0..4 {
            assert_eq!(t.a_u[k], 0.0);
            assert_eq!(t.b_u[k], 0.0);
            assert!((t.b_c[k] - 2.5 * c.dbar[k]).abs() < 1e-15);
            assert!((t.b_alpha[k] - 2.5 * t.a_alpha[k]).abs() < 1e-15);
            assert!((t.b_sigma[k] - 2.5 * t.a_sigma[k]).abs() < 1e-15);
        }
        assert!(matches!(
            sf_coefficients(&p, &c, 3, 4, 50, 10.0),
            Err(Error::Horizon { horizon: 3, order: 4 })
        ));
    }

    #[test]
    fn recursion_one_step_by_hand() {
        // n = 1, L = 2, N = 3, rho = (1, 0.5, 0.25, 0.125), w = 0.1
        let c = consts(vec![1.0, 0.5, 0.25, 0.125], 0.1, 2.0, 3.0, 0.0);
        let p = prediction_error_constants(&c, 2, 3).unwrap();
        // dbar = (0, 0.1, 0.15, 0.175); c_alpha_k = rho_k dbar_1 + dbar_{1+k}
        assert!((p.c_alpha[1] - (0.5 * 0.1 + 0.15)).abs() < 1e-15);
        let t = sf_coefficients(&p, &c, 2, 1, 3, 1.0).unwrap();
        let (ca0, cs0) = (p.c_alpha[0], p.c_sigma[0]);
        let au1 = ca0 * 2.0 + cs0 * 2.0 * 0.15;
        assert!((t.a_u[1] - au1).abs() < 1e-14);
        assert!((t.a_alpha[1] - (au1 * 3.0 * p.c_alpha[1] + p.c_alpha[1])).abs() < 1e-14);
        let spread = 1.0 + 0.1;
        let ac1 = 0.0 + ca0 * 2.0 * spread + cs0 * (0.15 * 2.0 * spread + 0.1) + 0.1;
        assert!((t.a_c[1] - ac1).abs() < 1e-14);
    }

    #[test]
    fn csv_columns() {
        let c = consts(geometric(0.5, 11), 1e-3, 0.2, 0.7, 1.0);
        let p = prediction_error_constants(&c, 4, 10).unwrap();
        let t = sf_coefficients(&p, &c, 4, 2, 10, 5.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,a_u,a_alpha,a_sigma,a_c,b_u,b_alpha,b_sigma,b_c");
        assert_eq!(lines.count(), 4);
    }

    proptest! {
        #[test]
        fn monotone_and_nonnegative(
            r in 0.1f64..1.2,
            w in 1e-5f64..1e-2,
            c_pe in 0.0f64..2.0,
            gamma in 0.0f64..2.0,
            x_max in 0.5f64..20.0,
            kb in 0.0f64..3.0,
            which in 0usize..4,
            bump in 1.0f64..3.0,
        ) {
            let (l, n, nd) = (10, 3, 30);
            let build = |w: f64, c_pe: f64, gamma: f64, x_max: f64| {
                let c = consts(geometric(r, nd + 1), w, c_pe, gamma, kb);
                let p = prediction_error_constants(&c, l, nd).unwrap();
                sf_coefficients(&p, &c, l, n, nd, x_max).unwrap()
            };
            let base = build(w, c_pe, gamma, x_max);
            let mut args = [w, c_pe, gamma, x_max];
            args[which] *= bump;
            let bigger = build(args[0], args[1], args[2], args[3]);
            for ((_, a), (_, b)) in base.families().iter().zip(bigger.families().iter()) {
                for k in 0..l {
                    prop_assert!(a[k] >= 0.0);
                    prop_assert!(b[k] >= a[k] * (1.0 - 1e-12));
                }
            }
        }

        #[test]
        fn c_alpha_linear_in_noise(r in 0.1f64..1.1, w in 1e-6f64..1e-1) {
            let c1 = consts(geometric(r, 31), w, 0.1, 0.1, 1.0);
            let c2 = consts(geometric(r, 31), 2.0 * w, 0.1, 0.1, 1.0);
            let p1 = prediction_error_constants(&c1, 8, 30).unwrap();
            let p2 = prediction_error_constants(&c2, 8, 30).unwrap();
            for k in 0..=8 {
                prop_assert!((p2.c_alpha[k] - 2.0 * p1.c_alpha[k]).abs() <= 1e-12 * p2.c_alpha[k].max(1e-300));
                prop_assert!(p1.c_sigma[k] >= 1.0);
            }
        }

        #[test]
        fn locality(r in 0.1f64..1.0, w in 1e-4f64..1e-2) {
            // Changing c_alpha at index >= n + 1 leaves index n unchanged
            // (apart from the global c_alpha[L-1]).
            let c = consts(geometric(r, 31), w, 0.3, 0.4, 1.0);
            let p = prediction_error_constants(&c, 10, 30).unwrap();
            let t1 = sf_coefficients(&p, &c, 10, 3, 30, 5.0).unwrap();
            let mut p2 = p.clone();
            p2.c_alpha[5] *= 2.0;
            let t2 = sf_coefficients(&p2, &c, 10, 3, 30, 5.0).unwrap();
            for k in 0..5 {
                prop_assert_eq!(t1.a_alpha[k], t2.a_alpha[k]);
                prop_assert_eq!(t1.a_c[k], t2.a_c[k]);
            }
        }
    }
}
