//! Vector-valued sequences, block-Hankel matrices and persistency of excitation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Relative factor of the numerical-rank threshold
/// `sigma_i > RANK_RTOL * sigma_max * max(rows, cols)`.
pub const RANK_RTOL: f64 = 1e-8;

/// Maximum number of reseeded draws in [`generate_pe_input`].
pub const PE_MAX_ATTEMPTS: usize = 100;

/// A finite sequence of equally sized real vectors, indexed from 0.
///
/// Samples are stored as the columns of a `dim x len` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VecSequence {
    data: DMatrix<f64>,
}

impl VecSequence {
    pub fn from_columns(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::dim(format!(
                "sequence needs dim >= 1 and length >= 1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn from_samples(samples: &[DVector<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::dim("empty sample list"))?;
        let dim = first.len();
        if let Some(bad) = samples.iter().position(|s| s.len() != dim) {
            return Err(Error::dim(format!(
                "sample {bad} has dimension {} (expected {dim})",
                samples[bad].len()
            )));
        }
        Self::from_columns(DMatrix::from_columns(samples))
    }

    /// Scalar sequence from a slice.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_columns(DMatrix::from_row_slice(1, values.len(), values))
    }

    /// All-zero sequence.
    pub fn zeros(dim: usize, len: usize) -> Result<Self> {
        Self::from_columns(DMatrix::zeros(dim, len))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample(&self, k: usize) -> DVector<f64> {
        self.data.column(k).into_owned()
    }

    pub fn samples(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.data.column_iter().map(|c| c.into_owned())
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Contiguous subsequence `z_a, ..., z_{a+len-1}`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::dim(format!(
                "slice [{start}, {}) out of range for length {}",
                start + len,
                self.len()
            )));
        }
        Self::from_columns(self.data.columns(start, len).into_owned())
    }

    /// Largest componentwise magnitude over the whole sequence.
    pub fn max_abs(&self) -> f64 {
        self.data.amax()
    }

    /// Write as CSV with header `prefix0, prefix1, ...`, one row per time step.
    pub fn write_csv<W: Write>(&self, writer: W, prefix: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.dim()).map(|i| format!("{prefix}{i}")).collect();
        w.write_record(&header).map_err(csv_err)?;
        for col in self.data.column_iter() {
            w.write_record(col.iter().map(|v| format!("{v:e}")))
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers().map_err(csv_err)?.len();
        let mut values = Vec::new();
        let mut len = 0;
        for record in r.records() {
            let record = record.map_err(csv_err)?;
            if record.len() != dim {
                return Err(Error::Parse(format!(
                    "row {len} has {} fields, header has {dim}",
                    record.len()
                )));
            }
            for field in record.iter() {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {len}: {e}")))?,
                );
            }
            len += 1;
        }
        Self::from_columns(DMatrix::from_column_slice(dim, len, &values))
    }

    pub fn save_csv(&self, path: &Path, prefix: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), prefix)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Block-Hankel matrix of depth `L`: column `j` is the stacked window `z_[j, j+L-1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HankelMatrix {
    entries: DMatrix<f64>,
    depth: usize,
    block_dim: usize,
}

impl HankelMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

pub fn build_hankel(z: &VecSequence, depth: usize) -> Result<HankelMatrix> {
    if depth == 0 {
        return Err(Error::dim("Hankel depth must be >= 1"));
    }
    if z.len() < depth {
        return Err(Error::dim(format!(
            "sequence length {} is shorter than Hankel depth {depth}",
            z.len()
        )));
    }
    let d = z.dim();
    let cols = z.len() - depth + 1;
    let src = z.as_matrix();
    let entries = DMatrix::from_fn(d * depth, cols, |r, j| src[(r % d, j + r / d)]);
    Ok(HankelMatrix {
        entries,
        depth,
        block_dim: d,
    })
}

/// Stacked window `z_[a, b] = (z_a, ..., z_b)`.
pub fn stack_window(z: &VecSequence, a: usize, b: usize) -> Result<DVector<f64>> {
    if a > b || b >= z.len() {
        return Err(Error::dim(format!(
            "window [{a}, {b}] invalid for length {}",
            z.len()
        )));
    }
    let d = z.dim();
    let src = z.as_matrix();
    Ok(DVector::from_fn(d * (b - a + 1), |r, _| src[(r % d, a + r / d)]))
}

fn rank_threshold(singular: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = singular.iter().cloned().fold(0.0_f64, f64::max);
    RANK_RTOL * smax * rows.max(cols) as f64
}

/// Numerical rank using the relative singular-value threshold [`RANK_RTOL`].
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let tol = rank_threshold(&sv, m.nrows(), m.ncols());
    sv.iter().filter(|&&s| s > tol).count()
}

/// Moore-Penrose pseudoinverse through the SVD, truncated at the numerical rank.
pub fn pseudoinverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let tol = rank_threshold(&svd.singular_values, m.nrows(), m.ncols());
    let u = svd.u.as_ref().expect("U requested");
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += (v_t.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    out
}

/// Persistency of excitation: `rank(H_L(u)) = m L`.
pub fn pe_order_check(u: &VecSequence, order: usize) -> bool {
    if order == 0 {
        return true;
    }
    // H_L needs at least mL columns to have full row rank.
    if u.len() + 1 < order * (u.dim() + 1) {
        return false;
    }
    match build_hankel(u, order) {
        Ok(h) => numerical_rank(h.matrix()) == u.dim() * order,
        Err(_) => false,
    }
}

/// Minimum length for an `m`-dimensional input to be PE of order `order`.
pub fn min_pe_length(m: usize, order: usize) -> usize {
    ((m + 1) * order).saturating_sub(1)
}

/// Seeded sequence with i.i.d. entries uniform on `[-bound, bound]`.
pub fn uniform_sequence(dim: usize, len: usize, bound: f64, seed: u64) -> Result<VecSequence> {
    if bound < 0.0 || !bound.is_finite() {
        return Err(Error::Precondition(format!("bound must be >= 0, got {bound}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = DMatrix::from_fn(dim, len, |_, _| {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    });
    VecSequence::from_columns(data)
}

/// Uniform excitation on the hypercube `[-bound, bound]^m`, redrawn with
/// seed offsets until it is persistently exciting of the requested order.
pub fn generate_pe_input(
    m: usize,
    len: usize,
    bound: f64,
    order: usize,
    seed: u64,
) -> Result<VecSequence> {
    if m == 0 {
        return Err(Error::Precondition("input dimension must be >= 1".into()));
    }
    if !(bound > 0.0) {
        return Err(Error::Precondition(format!(
            "excitation bound must be > 0, got {bound}"
        )));
    }
    let needed = min_pe_length(m, order);
    if len < needed {
        return Err(Error::Precondition(format!(
            "length {len} too short for PE of order {order} (needs >= {needed})"
        )));
    }
    for attempt in 0..PE_MAX_ATTEMPTS {
        let u = uniform_sequence(m, len, bound, seed.wrapping_add(attempt as u64))?;
        if pe_order_check(&u, order) {
            return Ok(u);
        }
    }
    Err(Error::Excitation {
        len,
        order,
        attempts: PE_MAX_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq2() -> VecSequence {
        VecSequence::from_samples(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ])
        .unwrap()
    }

    /// Independent enumerator: stacks windows one by one.
    fn windows_by_enumeration(z: &VecSequence, depth: usize) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..=z.len() - depth)
            .map(|j| {
                let mut v = Vec::new();
                for i in 0..depth {
                    v.extend(z.sample(j + i).iter());
                }
                DVector::from_vec(v)
            })
            .collect();
        DMatrix::from_columns(&cols)
    }

    #[test]
    fn hankel_scalar() {
        let z = VecSequence::from_scalars(&[1.0, 2.0, 3.0]).unwrap();
        let h = build_hankel(&z, 2).unwrap();
        assert_eq!(h.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
    }

    #[test]
    fn hankel_full_depth_is_single_window() {
        let z = VecSequence::from_scalars(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let h = build_hankel(&z, 5).unwrap();
        assert_eq!(h.ncols(), 1);
        assert_eq!(h.matrix().column(0).into_owned(), stack_window(&z, 0, 4).unwrap());
    }

    #[test]
    fn hankel_vector_valued() {
        let z = seq2();
        let h = build_hankel(&z, 2).unwrap();
        let expected =
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(h.matrix(), &expected);
        assert_eq!(h.matrix(), &windows_by_enumeration(&z, 2));
    }

    #[test]
    fn hankel_too_deep() {
        let z = VecSequence::from_scalars(&[1.0, 2.0]).unwrap();
        assert!(matches!(build_hankel(&z, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn windows() {
        let z = VecSequence::from_scalars(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(stack_window(&z, 0, 2).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(stack_window(&z, 1, 1).unwrap().as_slice(), &[2.0]);
        assert_eq!(
            stack_window(&seq2(), 1, 2).unwrap().as_slice(),
            &[0.0, 1.0, 1.0, 1.0]
        );
        assert!(stack_window(&z, 2, 3).is_err());
        assert!(stack_window(&z, 2, 1).is_err());
    }

    #[test]
    fn pe_examples() {
        let c = VecSequence::from_scalars(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(!pe_order_check(&c, 2));
        let u = VecSequence::from_scalars(&[1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // [[1,0,0,1],[0,0,1,0]] has rank 2
        assert_eq!(
            numerical_rank(&DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0])),
            2
        );
        assert!(pe_order_check(&u, 2));
        assert!(!pe_order_check(&u, 6));
    }

    #[test]
    fn pinv_single_column() {
        let h = DMatrix::from_row_slice(2, 1, &[2.0, 1.0]);
        let p = pseudoinverse(&h);
        assert!((p[(0, 0)] - 0.4).abs() < 1e-14);
        assert!((p[(0, 1)] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn pinv_rank_deficient_is_moore_penrose() {
        let h = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 1.0, 0.0, 1.0]);
        let p = pseudoinverse(&h);
        assert!((&h * &p * &h - &h).amax() < 1e-12);
        assert!((&p * &h * &p - &p).amax() < 1e-12);
        assert!(((&h * &p).transpose() - &h * &p).amax() < 1e-12);
    }

    #[test]
    fn generated_input_is_pe() {
        let u = generate_pe_input(1, 50, 1.0, 17, 1).unwrap();
        assert_eq!(u.len(), 50);
        assert!(pe_order_check(&u, 17));
        assert_eq!(u, generate_pe_input(1, 50, 1.0, 17, 1).unwrap());
    }

    #[test]
    fn generated_input_too_short() {
        assert!(matches!(
            generate_pe_input(1, 20, 1.0, 17, 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let z = seq2();
        let mut buf = Vec::new();
        z.write_csv(&mut buf, "u").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("u0,u1\n"));
        assert_eq!(VecSequence::read_csv(buf.as_slice()).unwrap(), z);
    }

    proptest! {
        #[test]
        fn hankel_columns_are_windows(
            values in prop::collection::vec(-10.0f64..10.0, 2..40),
            dim in 1usize..3,
            depth in 1usize..6,
        ) {
            let len = values.len() / dim;
            prop_assume!(len >= depth);
            let z = VecSequence::from_columns(
                DMatrix::from_column_slice(dim, len, &values[..dim * len])).unwrap();
            let h = build_hankel(&z, depth).unwrap();
            prop_assert_eq!(h.ncols(), len - depth + 1);
            for j in 0..h.ncols() {
                let w = stack_window(&z, j, j + depth - 1).unwrap();
                prop_assert_eq!(h.matrix().column(j).into_owned(), w);
            }
        }

        #[test]
        fn pe_is_monotone_in_order(seed in 0u64..200, len in 5usize..30) {
            let u = uniform_sequence(1, len, 1.0, seed).unwrap();
            let mut seen_fail = false;
            for order in 1..=len {
                let pe = pe_order_check(&u, order);
                if seen_fail { prop_assert!(!pe); }
                if !pe { seen_fail = true; }
            }
        }

        #[test]
        fn generated_input_respects_bound(seed in 0u64..1000, bound in 0.1f64..20.0) {
            let u = generate_pe_input(2, 30, bound, 5, seed).unwrap();
            prop_assert!(u.max_abs() <= bound);
            prop_assert_eq!(u.clone(), generate_pe_input(2, 30, bound, 5, seed).unwrap());
        }
    }
}
