//! Distribution-profile extraction.
//!
//! A profile summarizes a client's data as sanitized first and second
//! moments in a shared low-dimensional latent space. The pipeline has four
//! steps: global bound alignment from per-client min/max vectors, a
//! shared-seed PCA fitted on synthetic reference points drawn inside those
//! bounds, Monte-Carlo moment estimation over Bernoulli subsampling masks,
//! and per-coordinate Laplace sanitization calibrated to Range/(v * eps).
//! The marginal block is computable without labels and serves as the
//! label-free subvector used at test time.

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{extract_latents, ModelParams};
use crate::numerics::{
    bernoulli_mask, fit_shared_pca, laplace_draw, sample_uniform_box, Matrix, PcaProjector,
};
use crate::rng::{derive_global, Purpose};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Coordinate-wise bounds of the latent space, assembled from per-client
/// min/max vectors. Exactly 2z floats per client ever leave a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GlobalBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
                context: "global bounds",
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::invalid("global bounds must satisfy lower <= upper"));
        }
        Ok(GlobalBounds { lower, upper })
    }

    /// Coordinate-wise min-of-mins / max-of-maxes over client bounds.
    pub fn aggregate(client_bounds: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let first = client_bounds
            .first()
            .ok_or(Error::EmptyInput("client bounds"))?;
        let mut lower = first.0.clone();
        let mut upper = first.1.clone();
        for (lo, hi) in client_bounds.iter().skip(1) {
            for (acc, v) in lower.iter_mut().zip(lo) {
                *acc = acc.min(*v);
            }
            for (acc, v) in upper.iter_mut().zip(hi) {
                *acc = acc.max(*v);
            }
        }
        GlobalBounds::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// Coordinate-wise min and max of a latent matrix.
pub fn client_bounds(latents: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if latents.rows() == 0 {
        return Err(Error::EmptyInput("latents"));
    }
    let mut min = latents.row(0).to_vec();
    let mut max = min.clone();
    for row in latents.iter_rows().skip(1) {
        for ((mn, mx), v) in min.iter_mut().zip(max.iter_mut()).zip(row) {
            *mn = mn.min(*v);
            *mx = mx.max(*v);
        }
    }
    Ok((min, max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpeConfig {
    /// Reduced latent width l.
    pub pca_dim: usize,
    /// Synthetic points drawn for the shared projector.
    pub reference_points: usize,
    /// Monte-Carlo mask count M.
    pub masks: usize,
    /// Bernoulli inclusion probability gamma.
    pub mask_prob: f64,
    /// Per-profile privacy budget.
    pub epsilon: f64,
    /// Bypass the Laplace mechanism; epsilon_used is recorded as infinite.
    pub no_dp: bool,
    /// Shared seed of the reference-point draw.
    pub pca_seed: u64,
}

impl Default for DpeConfig {
    fn default() -> Self {
        DpeConfig {
            pca_dim: 10,
            reference_points: 200,
            masks: 3,
            mask_prob: 0.5,
            epsilon: 10.0,
            no_dp: false,
            pca_seed: 7,
        }
    }
}

impl DpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pca_dim == 0 {
            return Err(Error::invalid("pca_dim must be positive"));
        }
        if self.masks == 0 {
            return Err(Error::invalid("masks must be at least 1"));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::invalid("mask_prob must be in (0, 1]"));
        }
        if !self.no_dp && (self.epsilon.is_nan() || self.epsilon <= 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// DP-sanitized moment profile. Full dimension d = 2l(1 + U); the marginal
/// block of length 2l is the label-free subvector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionProfile {
    pub marginal_mean: Vec<f64>,
    pub marginal_var: Vec<f64>,
    pub class_mean: Vec<Vec<f64>>,
    pub class_var: Vec<Vec<f64>>,
    pub class_present: Vec<bool>,
    pub epsilon_used: f64,
    pub sample_count: usize,
    pub round: u64,
    pub client_id: u64,
}

impl DistributionProfile {
    pub fn latent_dim(&self) -> usize {
        self.marginal_mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_mean.len()
    }

    /// Full profile dimension d = 2l(1 + U).
    pub fn dim(&self) -> usize {
        2 * self.latent_dim() * (1 + self.num_classes())
    }

    /// The label-free subvector: marginal mean and variance, length 2l.
    pub fn marginal_vector(&self) -> Vec<f64> {
        let mut v = self.marginal_mean.clone();
        v.extend_from_slice(&self.marginal_var);
        v
    }

    /// One flat numeric record: client_id, round, epsilon, v, 2l marginal
    /// values, 2lU class values, U presence bits.
    pub fn to_record(&self) -> String {
        let mut fields: Vec<String> = vec![
            self.client_id.to_string(),
            self.round.to_string(),
            format!("{:?}", self.epsilon_used),
            self.sample_count.to_string(),
        ];
        for v in self.marginal_mean.iter().chain(&self.marginal_var) {
            fields.push(format!("{v:?}"));
        }
        for (mean, var) in self.class_mean.iter().zip(&self.class_var) {
            for v in mean.iter().chain(var) {
                fields.push(format!("{v:?}"));
            }
        }
        for p in &self.class_present {
            fields.push(if *p { "1".into() } else { "0".into() });
        }
        fields.join(",")
    }
}

/// Moments before sanitization, produced by the Monte-Carlo step.
#[derive(Debug, Clone)]
pub struct RawProfile {
    pub marginal_mean: Vec<f64>,
    pub marginal_var: Vec<f64>,
    pub class_mean: Vec<Vec<f64>>,
    pub class_var: Vec<Vec<f64>>,
    pub class_present: Vec<bool>,
    pub sample_count: usize,
}

/// Build the shared projector from global bounds: draw the reference points
/// with the shared seed and fit the PCA. Identical inputs produce
/// bit-identical projectors on every party.
pub fn build_reference_projector(bounds: &GlobalBounds, cfg: &DpeConfig) -> Result<PcaProjector> {
    cfg.validate()?;
    if cfg.pca_dim > bounds.dim() {
        return Err(Error::invalid(format!(
            "pca_dim {} exceeds latent width {}",
            cfg.pca_dim,
            bounds.dim()
        )));
    }
    let mut rng = derive_global(cfg.pca_seed, Purpose::ReferencePoints);
    let points = sample_uniform_box(&bounds.lower, &bounds.upper, cfg.reference_points, &mut rng)?;
    fit_shared_pca(&points, cfg.pca_dim, cfg.pca_seed)
}

/// Mean and unbiased variance per column of the selected rows. Returns
/// None when fewer than 2 rows are selected.
fn masked_moments(reduced: &Matrix, selected: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    if selected.len() < 2 {
        return None;
    }
    let dim = reduced.cols();
    let mut mean = vec![0.0; dim];
    for &i in selected {
        for (m, v) in mean.iter_mut().zip(reduced.row(i)) {
            *m += v;
        }
    }
    let n = selected.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for &i in selected {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(reduced.row(i)) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n - 1.0);
    Some((mean, var))
}

const MASK_RETRIES: usize = 8;

/// Monte-Carlo moment estimation: average mean/variance estimates over M
/// Bernoulli(gamma) masks, marginally and per class when labels are given.
///
/// A mask selecting fewer than 2 rows is redrawn up to 8 times and then
/// replaced by the full sample. Classes with fewer than 2 masked samples
/// are skipped in that mask's average; a class that is present overall but
/// never got a valid mask falls back to its full-sample moments.
pub fn monte_carlo_moments(
    reduced: &Matrix,
    labels: Option<&[usize]>,
    num_classes: usize,
    cfg: &DpeConfig,
    rng: &mut impl Rng,
) -> Result<RawProfile> {
    cfg.validate()?;
    let v = reduced.rows();
    if v < 2 {
        return Err(Error::EmptyInput("need at least 2 rows for moments"));
    }
    if let Some(l) = labels {
        if l.len() != v {
            return Err(Error::DimensionMismatch {
                expected: v,
                got: l.len(),
                context: "labels vs latent rows",
            });
        }
    }
    let dim = reduced.cols();
    let all_rows: Vec<usize> = (0..v).collect();

    let mut marg_mean_acc = vec![0.0; dim];
    let mut marg_var_acc = vec![0.0; dim];
    let mut class_mean_acc = vec![vec![0.0; dim]; num_classes];
    let mut class_var_acc = vec![vec![0.0; dim]; num_classes];
    let mut class_hits = vec![0usize; num_classes];

    for _ in 0..cfg.masks {
        let mut selected: Vec<usize> = Vec::new();
        for _try in 0..=MASK_RETRIES {
            let mask = bernoulli_mask(v, cfg.mask_prob, rng);
            selected = all_rows
                .iter()
                .copied()
                .filter(|&i| mask[i])
                .collect();
            if selected.len() >= 2 {
                break;
            }
        }
        if selected.len() < 2 {
            selected = all_rows.clone();
        }

        let (mean, var) = masked_moments(reduced, &selected).expect("selection has >= 2 rows");
        for (acc, v) in marg_mean_acc.iter_mut().zip(&mean) {
            *acc += v;
        }
        for (acc, v) in marg_var_acc.iter_mut().zip(&var) {
            *acc += v;
        }

        if let Some(labels) = labels {
            for class in 0..num_classes {
                let class_rows: Vec<usize> = selected
                    .iter()
                    .copied()
                    .filter(|&i| labels[i] == class)
                    .collect();
                if let Some((cm, cv)) = masked_moments(reduced, &class_rows) {
                    for (acc, v) in class_mean_acc[class].iter_mut().zip(&cm) {
                        *acc += v;
                    }
                    for (acc, v) in class_var_acc[class].iter_mut().zip(&cv) {
                        *acc += v;
                    }
                    class_hits[class] += 1;
                }
            }
        }
    }

    let m = cfg.masks as f64;
    marg_mean_acc.iter_mut().for_each(|x| *x /= m);
    marg_var_acc.iter_mut().for_each(|x| *x /= m);

    let mut class_present = vec![false; num_classes];
    if let Some(labels) = labels {
        for class in 0..num_classes {
            let rows: Vec<usize> = all_rows
                .iter()
                .copied()
                .filter(|&i| labels[i] == class)
                .collect();
            class_present[class] = rows.len() >= 2;
            if !class_present[class] {
                class_mean_acc[class].iter_mut().for_each(|x| *x = 0.0);
                class_var_acc[class].iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            if class_hits[class] > 0 {
                let h = class_hits[class] as f64;
                class_mean_acc[class].iter_mut().for_each(|x| *x /= h);
                class_var_acc[class].iter_mut().for_each(|x| *x /= h);
            } else {
                let (cm, cv) = masked_moments(reduced, &rows).expect("present class has >= 2 rows");
                class_mean_acc[class] = cm;
                class_var_acc[class] = cv;
            }
        }
    }

    Ok(RawProfile {
        marginal_mean: marg_mean_acc,
        marginal_var: marg_var_acc,
        class_mean: class_mean_acc,
        class_var: class_var_acc,
        class_present,
        sample_count: v,
    })
}

/// Per-statistic sensitivity ranges in the reduced space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatisticRanges {
    /// Extent of the projected bounding box along each component; range of
    /// a mean statistic.
    pub mean_range: Vec<f64>,
    /// (extent / 2)^2; an upper bound on any attainable variance, so the
    /// range of a variance statistic.
    pub var_range: Vec<f64>,
}

impl StatisticRanges {
    /// Extent of the image of the bounding box under the projection:
    /// along output coordinate i it is sum_j |P_ij| (upper_j - lower_j).
    pub fn from_bounds(bounds: &GlobalBounds, projector: &PcaProjector) -> Self {
        let dim = projector.output_dim;
        let mean_range: Vec<f64> = (0..dim)
            .map(|i| {
                projector
                    .projection
                    .row(i)
                    .iter()
                    .zip(bounds.lower.iter().zip(&bounds.upper))
                    .map(|(p, (l, u))| p.abs() * (u - l))
                    .sum()
            })
            .collect();
        let var_range = mean_range.iter().map(|e| (e / 2.0) * (e / 2.0)).collect();
        StatisticRanges {
            mean_range,
            var_range,
        }
    }

    pub fn max_range(&self) -> f64 {
        self.mean_range
            .iter()
            .chain(&self.var_range)
            .cloned()
            .fold(0.0, f64::max)
    }
}

/// Laplace scale for one statistic: b = Range / (v * epsilon).
pub fn laplace_scale(range: f64, sample_count: usize, epsilon: f64) -> f64 {
    range / (sample_count as f64 * epsilon)
}

/// Laplace sanitization: each released coordinate is perturbed with
/// independent Laplace(0, Range_i / (v * eps)) noise, giving (eps, 0)-DP at
/// the sample level. Absent class blocks stay zero-filled.
pub fn sanitize(
    raw: &RawProfile,
    cfg: &DpeConfig,
    ranges: &StatisticRanges,
    round: u64,
    client_id: u64,
    rng: &mut impl Rng,
) -> Result<DistributionProfile> {
    cfg.validate()?;
    let v = raw.sample_count;
    if v == 0 {
        return Err(Error::EmptyInput("profile sample count"));
    }
    if ranges
        .mean_range
        .iter()
        .chain(&ranges.var_range)
        .any(|r| !r.is_finite() || *r <= 0.0)
    {
        return Err(Error::invalid("statistic ranges must be finite and positive"));
    }

    if cfg.no_dp {
        return Ok(DistributionProfile {
            marginal_mean: raw.marginal_mean.clone(),
            marginal_var: raw.marginal_var.clone(),
            class_mean: raw.class_mean.clone(),
            class_var: raw.class_var.clone(),
            class_present: raw.class_present.clone(),
            epsilon_used: f64::INFINITY,
            sample_count: v,
            round,
            client_id,
        });
    }

    fn perturb(values: &[f64], ranges: &[f64], v: usize, eps: f64, rng: &mut impl Rng) -> Vec<f64> {
        values
            .iter()
            .zip(ranges)
            .map(|(x, r)| x + laplace_draw(laplace_scale(*r, v, eps), rng))
            .collect()
    }

    let eps = cfg.epsilon;
    let marginal_mean = perturb(&raw.marginal_mean, &ranges.mean_range, v, eps, rng);
    let marginal_var = perturb(&raw.marginal_var, &ranges.var_range, v, eps, rng);

    let mut class_mean = Vec::with_capacity(raw.class_mean.len());
    let mut class_var = Vec::with_capacity(raw.class_var.len());
    for class in 0..raw.class_mean.len() {
        if raw.class_present[class] {
            class_mean.push(perturb(&raw.class_mean[class], &ranges.mean_range, v, eps, rng));
            class_var.push(perturb(&raw.class_var[class], &ranges.var_range, v, eps, rng));
        } else {
            class_mean.push(raw.class_mean[class].clone());
            class_var.push(raw.class_var[class].clone());
        }
    }

    Ok(DistributionProfile {
        marginal_mean,
        marginal_var,
        class_mean,
        class_var,
        class_present: raw.class_present.clone(),
        epsilon_used: cfg.epsilon,
        sample_count: v,
        round,
        client_id,
    })
}

/// Frozen extraction context: the encoder model, the global bounds, the
/// shared projector and the sensitivity ranges derived from them.
#[derive(Debug, Clone)]
pub struct ProfileExtractor {
    pub encoder: ModelParams,
    pub bounds: GlobalBounds,
    pub projector: PcaProjector,
    pub ranges: StatisticRanges,
    pub cfg: DpeConfig,
    pub num_classes: usize,
}

impl ProfileExtractor {
    pub fn new(
        encoder: ModelParams,
        bounds: GlobalBounds,
        cfg: DpeConfig,
        num_classes: usize,
    ) -> Result<Self> {
        let projector = build_reference_projector(&bounds, &cfg)?;
        let ranges = StatisticRanges::from_bounds(&bounds, &projector);
        Ok(ProfileExtractor {
            encoder,
            bounds,
            projector,
            ranges,
            cfg,
            num_classes,
        })
    }

    /// Full pipeline on one dataset: latents, projection, Monte-Carlo
    /// moments, sanitization. With `with_labels` false the label vector is
    /// never read; class blocks are zero-filled with all-false presence,
    /// yielding the label-free subvector.
    pub fn extract(
        &self,
        data: &ClientDataset,
        with_labels: bool,
        rng: &mut impl Rng,
    ) -> Result<DistributionProfile> {
        let latents = extract_latents(&self.encoder, &data.features)?;
        let reduced = self.projector.project(&latents)?;
        let labels = if with_labels {
            Some(data.labels.as_slice())
        } else {
            None
        };
        let raw = monte_carlo_moments(&reduced, labels, self.num_classes, &self.cfg, rng)?;
        sanitize(&raw, &self.cfg, &self.ranges, data.round, data.client_id, rng)
    }

    /// Moments with no subsampling and no noise; the deterministic center
    /// of the stochastic profile, used by the fidelity harness.
    pub fn extract_exact(&self, data: &ClientDataset, with_labels: bool) -> Result<DistributionProfile> {
        let exact_cfg = DpeConfig {
            masks: 1,
            mask_prob: 1.0,
            no_dp: true,
            ..self.cfg.clone()
        };
        let latents = extract_latents(&self.encoder, &data.features)?;
        let reduced = self.projector.project(&latents)?;
        let labels = if with_labels {
            Some(data.labels.as_slice())
        } else {
            None
        };
        let mut rng = derive_global(0, Purpose::Mask); // unused under mask_prob = 1
        let raw = monte_carlo_moments(&reduced, labels, self.num_classes, &exact_cfg, &mut rng)?;
        sanitize(
            &raw,
            &exact_cfg,
            &self.ranges,
            data.round,
            data.client_id,
            &mut rng,
        )
    }
}
