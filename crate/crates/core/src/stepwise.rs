//! Stepwise graph convolution.
//!
//! Each embedding dimension `j` carries its own layer-weight profile
//! `alpha[j][l]`, derived from a per-dimension teleport ratio `beta[j]`:
//!
//! ```text
//! alpha[j][l] = (1 - b) / (1 - b^(L+1)) * b^l,   b = beta[j]
//! forward:  beta[j] = scale * (1 - ((j-1)/d)^gamma)     (j = 1..d)
//! backward: beta'[j] = 1 - beta[j]
//! ```
//!
//! Every alpha row sums to 1, so the convolution preserves magnitude across
//! dimensions. Early dimensions (large beta) spread weight across layers and
//! absorb collaborative smoothing; late dimensions (small beta) concentrate
//! weight at layer 0 and keep their initialization. The backward profile is
//! complementary, so the most modality-loyal dimensions receive the most
//! similarity-graph enhancement during updates.

use crate::error::{Error, Result};
use crate::graphs::SparsePropagationGraph;
use crate::mat::Mat;

/// Default teleport-ratio scale for the leading dimension.
pub const DEFAULT_BETA_SCALE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Per-dimension layer weights for one convolution direction.
#[derive(Debug, Clone)]
pub struct StepwiseSchedule {
    d: usize,
    layers: usize,
    beta: Vec<f64>,
    /// d x (layers+1), row-major.
    alpha: Vec<f64>,
    direction: Direction,
}

fn alpha_row(beta: f64, layers: usize) -> Vec<f64> {
    if beta == 0.0 {
        // limit form: all weight at layer 0
        let mut row = vec![0.0; layers + 1];
        row[0] = 1.0;
        return row;
    }
    let norm = (1.0 - beta) / (1.0 - beta.powi(layers as i32 + 1));
    (0..=layers).map(|l| norm * beta.powi(l as i32)).collect()
}

impl StepwiseSchedule {
    /// Builds the gamma-controlled schedule with the default 0.9 scale.
    pub fn build(d: usize, layers: usize, gamma: f64, direction: Direction) -> Result<Self> {
        Self::build_scaled(d, layers, gamma, DEFAULT_BETA_SCALE, direction)
    }

    /// As [`build`](Self::build) with an explicit teleport-ratio scale.
    pub fn build_scaled(
        d: usize,
        layers: usize,
        gamma: f64,
        beta_scale: f64,
        direction: Direction,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        if gamma <= 0.0 {
            return Err(Error::Config(format!("gamma = {gamma} must be positive")));
        }
        if !(0.0..1.0).contains(&beta_scale) {
            return Err(Error::Config(format!(
                "beta scale {beta_scale} must lie in [0, 1)"
            )));
        }
        let beta: Vec<f64> = (1..=d)
            .map(|j| {
                let fwd = beta_scale * (1.0 - ((j - 1) as f64 / d as f64).powf(gamma));
                match direction {
                    Direction::Forward => fwd,
                    Direction::Backward => 1.0 - fwd,
                }
            })
            .collect();
        Self::from_beta(beta, layers, direction)
    }

    /// Schedule with a single teleport ratio shared by every dimension.
    pub fn constant_beta(
        d: usize,
        layers: usize,
        beta: f64,
        direction: Direction,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta = {beta} must lie in [0, 1)")));
        }
        Self::from_beta(vec![beta; d], layers, direction)
    }

    /// Uniform layer weights `1/(L+1)`, the equal-weight convolution every
    /// dimension of a plain LightGCN-style model uses.
    pub fn uniform(d: usize, layers: usize, direction: Direction) -> Self {
        let w = 1.0 / (layers + 1) as f64;
        StepwiseSchedule {
            d,
            layers,
            beta: vec![f64::NAN; d],
            alpha: vec![w; d * (layers + 1)],
            direction,
        }
    }

    fn from_beta(beta: Vec<f64>, layers: usize, direction: Direction) -> Result<Self> {
        let d = beta.len();
        if beta.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("every beta must lie in [0, 1)".into()));
        }
        let mut alpha = Vec::with_capacity(d * (layers + 1));
        for &b in &beta {
            alpha.extend(alpha_row(b, layers));
        }
        Ok(StepwiseSchedule {
            d,
            layers,
            beta,
            alpha,
            direction,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self, j: usize, l: usize) -> f64 {
        self.alpha[j * (self.layers + 1) + l]
    }

    /// Weights of layer `l` across all dimensions.
    pub fn layer_weights(&self, l: usize) -> Vec<f64> {
        (0..self.d).map(|j| self.alpha(j, l)).collect()
    }

    /// Maximum deviation of any alpha row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.d)
            .map(|j| {
                let sum: f64 = (0..=self.layers).map(|l| self.alpha(j, l)).sum();
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Dumps the alpha matrix as CSV: d rows, L+1 columns.
    pub fn write_alpha_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for j in 0..self.d {
            let row: Vec<String> = (0..=self.layers)
                .map(|l| format!("{:.12}", self.alpha(j, l)))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Applies the stepwise convolution `out[:,j] = sum_l alpha[j][l] G^l in[:,j]`
/// by iterating one sparse product per layer and accumulating every column
/// with its own weight.
///
/// An exactly-identity graph short-circuits: every propagation power equals
/// the input and the row-stochastic weights make the convolution an identity
/// map, so the input is returned unchanged (exactly, not just within
/// round-off).
pub fn stepwise_convolve(
    graph: &SparsePropagationGraph,
    input: &Mat,
    schedule: &StepwiseSchedule,
) -> Result<Mat> {
    if input.rows() != graph.dimension() {
        return Err(Error::Shape(format!(
            "input has {} rows, graph has {} nodes",
            input.rows(),
            graph.dimension()
        )));
    }
    if input.cols() != schedule.dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, schedule covers {}",
            input.cols(),
            schedule.dim()
        )));
    }
    if graph.is_identity() {
        return Ok(input.clone());
    }
    let mut out = Mat::zeros(input.rows(), input.cols());
    out.add_col_scaled(input, &schedule.layer_weights(0));
    if schedule.layers() == 0 {
        return Ok(out);
    }
    let mut current = graph.propagate(input)?;
    let mut next = Mat::zeros(input.rows(), input.cols());
    for l in 1..=schedule.layers() {
        out.add_col_scaled(&current, &schedule.layer_weights(l));
        if l < schedule.layers() {
            graph.propagate_into(&current, &mut next)?;
            std::mem::swap(&mut current, &mut next);
        }
    }
    Ok(out)
}

/// Forward stepwise convolution producing latent representations `H` from
/// embeddings `E` over the bipartite graph.
pub fn forward_stepwise_convolution(
    graph: &SparsePropagationGraph,
    embeddings: &Mat,
    schedule: &StepwiseSchedule,
) -> Result<Mat> {
    if schedule.direction() != Direction::Forward {
        return Err(Error::Config(
            "forward convolution requires a forward schedule".into(),
        ));
    }
    stepwise_convolve(graph, embeddings, schedule)
}

/// Mean absolute per-dimension Pearson correlation between two equally
/// shaped matrices. Zero-variance dimensions contribute 0 with a warning.
pub fn modality_correlation_diagnostic(current: &Mat, init: &Mat) -> Result<f64> {
    if current.rows() != init.rows() || current.cols() != init.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            current.rows(),
            current.cols(),
            init.rows(),
            init.cols()
        )));
    }
    let n = current.rows();
    let d = current.cols();
    if n == 0 || d == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    let mean_a = current.col_means();
    let mean_b = init.col_means();
    let mut acc = 0.0;
    let mut degenerate = 0usize;
    for j in 0..d {
        let mut cov = 0.0;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        for i in 0..n {
            let da = current.get(i, j) - mean_a[j];
            let db = init.get(i, j) - mean_b[j];
            cov += da * db;
            var_a += da * da;
            var_b += db * db;
        }
        if var_a == 0.0 || var_b == 0.0 {
            degenerate += 1;
            continue;
        }
        acc += (cov / (var_a.sqrt() * var_b.sqrt())).abs();
    }
    if degenerate > 0 {
        log::warn!("{degenerate} zero-variance dimensions contribute 0 to the correlation mean");
    }
    Ok(acc / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    #[test]
    fn forward_schedule_figure_values() {
        // gamma = 1, d = 5, L = 3
        let s = StepwiseSchedule::build(5, 3, 1.0, Direction::Forward).unwrap();
        assert!((s.beta()[0] - 0.9).abs() < 1e-15);
        let expected_j1 = [0.290782, 0.261704, 0.235534, 0.211980];
        for (l, &e) in expected_j1.iter().enumerate() {
            assert!(
                (s.alpha(0, l) - e).abs() < 1e-4,
                "alpha[1][{l}] = {}",
                s.alpha(0, l)
            );
        }
        assert!((s.beta()[4] - 0.18).abs() < 1e-15);
        assert!((s.alpha(4, 0) - 0.8209).abs() < 1e-4);
    }

    #[test]
    fn backward_schedule_complements_forward() {
        let f = StepwiseSchedule::build(5, 3, 1.0, Direction::Forward).unwrap();
        let b = StepwiseSchedule::build(5, 3, 1.0, Direction::Backward).unwrap();
        for j in 0..5 {
            assert!((f.beta()[j] + b.beta()[j] - 1.0).abs() < 1e-15);
        }
        // weight concentrated at layer 0 for the leading dimension
        assert!((b.alpha(0, 0) - 0.9001).abs() < 1e-4);
    }

    #[test]
    fn rows_are_stochastic_and_monotone() {
        for &gamma in &[0.01, 0.1, 1.0, 5.0] {
            for &d in &[1usize, 5, 64] {
                for &layers in &[0usize, 1, 3] {
                    for direction in [Direction::Forward, Direction::Backward] {
                        let s = StepwiseSchedule::build(d, layers, gamma, direction).unwrap();
                        assert!(
                            s.max_row_sum_error() <= 1e-12,
                            "gamma {gamma} d {d} L {layers}"
                        );
                        for j in 0..d {
                            let b = s.beta()[j];
                            assert!((0.0..1.0).contains(&b));
                            if b > 0.0 && b < 1.0 {
                                for l in 1..=layers {
                                    assert!(s.alpha(j, l) < s.alpha(j, l - 1));
                                }
                            }
                        }
                        // beta monotone along the dimension
                        for j in 1..d {
                            match direction {
                                Direction::Forward => assert!(s.beta()[j] <= s.beta()[j - 1]),
                                Direction::Backward => assert!(s.beta()[j] >= s.beta()[j - 1]),
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_limits() {
        let zero = StepwiseSchedule::constant_beta(3, 4, 0.0, Direction::Forward).unwrap();
        for j in 0..3 {
            assert_eq!(zero.alpha(j, 0), 1.0);
            for l in 1..=4 {
                assert_eq!(zero.alpha(j, l), 0.0);
            }
        }
        let near_one = StepwiseSchedule::constant_beta(2, 3, 0.999_999, Direction::Forward)
            .unwrap();
        for l in 0..=3 {
            assert!((near_one.alpha(0, l) - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(StepwiseSchedule::build(4, 2, 0.0, Direction::Forward).is_err());
        assert!(StepwiseSchedule::build(4, 2, -1.0, Direction::Forward).is_err());
    }

    fn random_bipartite(
        rng: &mut impl Rng,
        users: usize,
        items: usize,
    ) -> SparsePropagationGraph {
        let mut pairs = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.4) {
                    pairs.push((u, i));
                }
            }
        }
        for u in 0..users as u32 {
            pairs.push((u, u % items as u32));
        }
        for i in 0..items as u32 {
            pairs.push((i % users as u32, i));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let ds = crate::dataset::InteractionDataset::from_indexed(users, items, pairs);
        crate::graphs::build_bipartite_graph(&ds).unwrap()
    }

    #[test]
    fn identity_graph_returns_input_exactly() {
        let mut rng = stream_rng(1, Stream::Synthetic);
        let n = 9;
        let d = 4;
        let e = Mat::from_rows(
            &(0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let schedule = StepwiseSchedule::build(d, 3, 0.5, Direction::Forward).unwrap();
        let g = SparsePropagationGraph::identity(n);
        let h = forward_stepwise_convolution(&g, &e, &schedule).unwrap();
        assert_eq!(h.as_slice(), e.as_slice());
    }

    #[test]
    fn uniform_schedule_matches_equal_weight_oracle() {
        let mut rng = stream_rng(2, Stream::Synthetic);
        for _ in 0..5 {
            let g = random_bipartite(&mut rng, 7, 6);
            let n = g.dimension();
            let d = 5;
            let layers = 3;
            let e = Mat::from_rows(
                &(0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let schedule = StepwiseSchedule::uniform(d, layers, Direction::Forward);
            let h = forward_stepwise_convolution(&g, &e, &schedule).unwrap();

            // dense equal-weight oracle: sum_l A^l E / (L+1)
            let dense = g.to_dense();
            let mut power = e.clone();
            let mut oracle = e.clone();
            for _ in 0..layers {
                let mut next = Mat::zeros(n, d);
                for i in 0..n {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += dense.get(i, j) * power.get(j, c);
                        }
                        next.set(i, c, acc);
                    }
                }
                power = next;
                oracle.axpy(1.0, &power);
            }
            for v in oracle.as_mut_slice() {
                *v /= (layers + 1) as f64;
            }
            assert!(h.max_abs_diff(&oracle) <= 1e-10);
        }
    }

    #[test]
    fn batched_equals_per_column_oracle() {
        let mut rng = stream_rng(3, Stream::Synthetic);
        for _ in 0..20 {
            let g = random_bipartite(&mut rng, 6, 5);
            let n = g.dimension();
            let d = 6;
            let layers = 3;
            let e = Mat::from_rows(
                &(0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let schedule = StepwiseSchedule::build(d, layers, 0.7, Direction::Forward).unwrap();
            let batched = forward_stepwise_convolution(&g, &e, &schedule).unwrap();

            // literal per-dimension convolution, one column at a time
            let mut oracle = Mat::zeros(n, d);
            for j in 0..d {
                let col = Mat::from_vec(n, 1, (0..n).map(|i| e.get(i, j)).collect()).unwrap();
                let mut acc = Mat::zeros(n, 1);
                let mut power = col.clone();
                acc.axpy(schedule.alpha(j, 0), &power);
                for l in 1..=layers {
                    power = g.propagate(&power).unwrap();
                    acc.axpy(schedule.alpha(j, l), &power);
                }
                for i in 0..n {
                    oracle.set(i, j, acc.get(i, 0));
                }
            }
            assert!(batched.max_abs_diff(&oracle) <= 1e-12);
        }
    }

    #[test]
    fn convolution_is_linear() {
        let mut rng = stream_rng(4, Stream::Synthetic);
        let g = random_bipartite(&mut rng, 8, 7);
        let n = g.dimension();
        let d = 4;
        let schedule = StepwiseSchedule::build(d, 2, 0.3, Direction::Forward).unwrap();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Mat::from_rows(
                &(0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let e1 = mk(&mut rng);
        let e2 = mk(&mut rng);
        let (a, b) = (1.7, -0.4);
        let mut combo = Mat::zeros(n, d);
        combo.axpy(a, &e1);
        combo.axpy(b, &e2);
        let lhs = forward_stepwise_convolution(&g, &combo, &schedule).unwrap();
        let h1 = forward_stepwise_convolution(&g, &e1, &schedule).unwrap();
        let h2 = forward_stepwise_convolution(&g, &e2, &schedule).unwrap();
        let mut rhs = Mat::zeros(n, d);
        rhs.axpy(a, &h1);
        rhs.axpy(b, &h2);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn correlation_diagnostic_cases() {
        let mut rng = stream_rng(5, Stream::Synthetic);
        let m = Mat::from_rows(
            &(0..50)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((modality_correlation_diagnostic(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = m.clone();
        neg.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
        assert!((modality_correlation_diagnostic(&neg, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_of_noise_is_small() {
        let mut rng = stream_rng(6, Stream::Synthetic);
        let n = 10_000;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Mat::from_rows(
                &(0..n)
                    .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let r = modality_correlation_diagnostic(&a, &b).unwrap();
        assert!(r < 0.05, "mean |r| = {r}");
    }

    #[test]
    fn schedule_csv_dump() {
        let s = StepwiseSchedule::build(3, 2, 1.0, Direction::Forward).unwrap();
        let mut buf = Vec::new();
        s.write_alpha_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 3);
    }
}
