//! Reward sources: fixed oracle tables and a Bradley–Terry reward model
//! fitted to pairwise preferences.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::math;
use crate::policy::{PromptId, PromptSpace, ResponseId};

/// Anything that assigns a scalar reward to a (prompt, response) cell.
pub trait RewardScorer {
    fn space(&self) -> PromptSpace;

    fn score(&self, x: PromptId, y: ResponseId) -> Result<f64>;
}

fn table_space(table: &Array2<f64>) -> PromptSpace {
    let (rows, cols) = table.dim();
    PromptSpace::new(rows, cols).expect("table shape validated at construction")
}

fn lookup(table: &Array2<f64>, x: PromptId, y: ResponseId) -> Result<f64> {
    let space = table_space(table);
    space.check_prompt(x)?;
    space.check_response(y)?;
    Ok(table[[x, y]])
}

fn validate_table(table: &Array2<f64>, what: &str) -> Result<()> {
    let (rows, cols) = table.dim();
    PromptSpace::new(rows, cols)?;
    if let Some(((x, y), v)) = table.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(numeric(format!(
            "{what} entry ({x}, {y}) is not finite: {v}"
        )));
    }
    Ok(())
}

/// Ground-truth reward table `r*(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReward {
    table: Array2<f64>,
}

impl OracleReward {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        validate_table(&table, "reward table")?;
        Ok(Self { table })
    }

    pub fn zeros(space: PromptSpace) -> Self {
        Self {
            table: Array2::zeros(space.shape()),
        }
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    /// Reads a headerless CSV matrix: one row per prompt, one column per
    /// response.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in csv.records().enumerate() {
            let record = record?;
            let row = record
                .iter()
                .map(|cell| {
                    cell.parse::<f64>().map_err(|e| {
                        domain(format!(
                            "reward csv row {}: bad value {cell:?}: {e}",
                            line + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(domain("reward csv rows have unequal lengths"));
        }
        let flat = rows.iter().flatten().copied().collect();
        let table =
            Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| domain(e.to_string()))?;
        Self::new(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for row in self.table.rows() {
            csv.write_record(row.iter().map(|v| v.to_string()))?;
        }
        csv.flush()?;
        Ok(())
    }
}

impl RewardScorer for OracleReward {
    fn space(&self) -> PromptSpace {
        table_space(&self.table)
    }

    fn score(&self, x: PromptId, y: ResponseId) -> Result<f64> {
        lookup(&self.table, x, y)
    }
}

/// Free per-cell Bradley–Terry reward table `r_θ(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtRewardModel {
    params: Array2<f64>,
    trained: bool,
}

impl BtRewardModel {
    pub fn new(params: Array2<f64>) -> Result<Self> {
        validate_table(&params, "reward model")?;
        Ok(Self {
            params,
            trained: false,
        })
    }

    pub fn zeros(space: PromptSpace) -> Self {
        Self {
            params: Array2::zeros(space.shape()),
            trained: false,
        }
    }

    pub fn params(&self) -> &Array2<f64> {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }
}

impl RewardScorer for BtRewardModel {
    fn space(&self) -> PromptSpace {
        table_space(&self.params)
    }

    fn score(&self, x: PromptId, y: ResponseId) -> Result<f64> {
        lookup(&self.params, x, y)
    }
}

/// The scorer used to label fresh responses during online training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSource {
    Oracle(OracleReward),
    Learned(BtRewardModel),
}

impl RewardScorer for RewardSource {
    fn space(&self) -> PromptSpace {
        match self {
            Self::Oracle(o) => o.space(),
            Self::Learned(m) => m.space(),
        }
    }

    fn score(&self, x: PromptId, y: ResponseId) -> Result<f64> {
        match self {
            Self::Oracle(o) => o.score(x, y),
            Self::Learned(m) => m.score(x, y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub prompt: PromptId,
    pub chosen: ResponseId,
    pub rejected: ResponseId,
}

/// Triples `(x, y_w, y_l)` with `y_w ≠ y_l`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pairs: Vec<Comparison>,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<Comparison>) -> Result<Self> {
        if let Some(c) = pairs.iter().find(|c| c.chosen == c.rejected) {
            return Err(domain(format!(
                "comparison on prompt {} has chosen == rejected ({})",
                c.prompt, c.chosen
            )));
        }
        Ok(Self { pairs })
    }

    /// Orders each `(x, y1, y2)` by `scorer`; ties go to the smaller id.
    pub fn label<S: RewardScorer + ?Sized>(
        scorer: &S,
        candidates: &[(PromptId, ResponseId, ResponseId)],
    ) -> Result<Self> {
        let pairs = candidates
            .iter()
            .map(|&(x, a, b)| {
                let (ra, rb) = (scorer.score(x, a)?, scorer.score(x, b)?);
                let a_wins = ra > rb || (ra == rb && a < b);
                let (chosen, rejected) = if a_wins { (a, b) } else { (b, a) };
                Ok(Comparison {
                    prompt: x,
                    chosen,
                    rejected,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[Comparison] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_dataset(rm: &BtRewardModel, data: &PreferenceDataset) -> Result<()> {
    if data.is_empty() {
        return Err(domain("preference dataset is empty"));
    }
    let space = rm.space();
    for c in data.pairs() {
        space.check_prompt(c.prompt)?;
        space.check_response(c.chosen)?;
        space.check_response(c.rejected)?;
    }
    Ok(())
}

/// Mean negative log-likelihood `−ln σ(r(x, y_w) − r(x, y_l))`.
pub fn bt_loss(rm: &BtRewardModel, data: &PreferenceDataset) -> Result<f64> {
    check_dataset(rm, data)?;
    let p = &rm.params;
    let total: f64 = data
        .pairs()
        .iter()
        .map(|c| -math::log_sigmoid(p[[c.prompt, c.chosen]] - p[[c.prompt, c.rejected]]))
        .sum();
    Ok(total / data.len() as f64)
}

pub fn bt_gradient(rm: &BtRewardModel, data: &PreferenceDataset) -> Result<Array2<f64>> {
    check_dataset(rm, data)?;
    let p = &rm.params;
    let n = data.len() as f64;
    let mut grad = Array2::zeros(p.dim());
    for c in data.pairs() {
        let margin = p[[c.prompt, c.chosen]] - p[[c.prompt, c.rejected]];
        let g = math::sigmoid(-margin) / n;
        grad[[c.prompt, c.chosen]] -= g;
        grad[[c.prompt, c.rejected]] += g;
    }
    Ok(grad)
}

#[derive(Clone, Debug)]
pub struct RewardTraining {
    pub model: BtRewardModel,
    /// Loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on [`bt_loss`].
pub fn train_reward_model(
    rm: &BtRewardModel,
    data: &PreferenceDataset,
    steps: usize,
    lr: f64,
) -> Result<RewardTraining> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(domain("reward model learning rate must be positive"));
    }
    let mut model = rm.clone();
    let mut loss_trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = bt_loss(&model, data)?;
        if !loss.is_finite() {
            return Err(numeric(format!(
                "reward model loss diverged at step {step}"
            )));
        }
        loss_trace.push(loss);
        let grad = bt_gradient(&model, data)?;
        model.params.scaled_add(-lr, &grad);
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(numeric(format!(
                "reward model parameters diverged at step {step}"
            )));
        }
    }
    model.trained = true;
    Ok(RewardTraining { model, loss_trace })
}

/// Fraction of comparisons the scorer orders strictly correctly.
pub fn pairwise_accuracy<S: RewardScorer + ?Sized>(
    scorer: &S,
    data: &PreferenceDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(domain("preference dataset is empty"));
    }
    let mut correct = 0usize;
    for c in data.pairs() {
        if scorer.score(c.prompt, c.chosen)? > scorer.score(c.prompt, c.rejected)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

impl From<OracleReward> for RewardSource {
    fn from(o: OracleReward) -> Self {
        Self::Oracle(o)
    }
}

impl From<BtRewardModel> for RewardSource {
    fn from(m: BtRewardModel) -> Self {
        Self::Learned(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::Error;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn space(n: usize, k: usize) -> PromptSpace {
        PromptSpace::new(n, k).unwrap()
    }

    #[test]
    fn score_lookup() {
        let zero = OracleReward::zeros(space(3, 4));
        assert_eq!(zero.score(2, 3).unwrap(), 0.0);
        let mut table = Array2::zeros((3, 4));
        table[[2, 3]] = 1.7;
        let oracle = OracleReward::new(table).unwrap();
        let forward: Vec<f64> = (0..4).map(|y| oracle.score(2, y).unwrap()).collect();
        let backward: Vec<f64> = (0..4).rev().map(|y| oracle.score(2, y).unwrap()).collect();
        assert_eq!(forward[3], 1.7);
        assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
        assert!(matches!(oracle.score(3, 0), Err(Error::Domain(_))));
        assert!(matches!(oracle.score(0, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let oracle = OracleReward::new(array![[0.5, -1.25, 3.0], [1e-3, 2.0, 0.0]]).unwrap();
        let mut buf = Vec::new();
        oracle.write_csv(&mut buf).unwrap();
        assert_eq!(
            OracleReward::from_csv_reader(buf.as_slice()).unwrap(),
            oracle
        );
        assert!(OracleReward::from_csv_reader("1,2\n3\n".as_bytes()).is_err());
        assert!(OracleReward::from_csv_reader("1,x\n".as_bytes()).is_err());
        assert!(OracleReward::from_csv_reader("1,inf\n".as_bytes()).is_err());
    }

    #[test]
    fn bt_loss_examples() {
        let data = PreferenceDataset::new(vec![
            Comparison {
                prompt: 0,
                chosen: 0,
                rejected: 1,
            },
            Comparison {
                prompt: 1,
                chosen: 2,
                rejected: 0,
            },
        ])
        .unwrap();
        let rm = BtRewardModel::zeros(space(2, 3));
        assert!((bt_loss(&rm, &data).unwrap() - 2f64.ln()).abs() < 1e-15);

        let single = PreferenceDataset::new(vec![Comparison {
            prompt: 0,
            chosen: 0,
            rejected: 1,
        }])
        .unwrap();
        let rm = BtRewardModel::new(array![[1.0, 0.0]]).unwrap();
        assert!((bt_loss(&rm, &single).unwrap() - 0.313262).abs() < 1e-6);
        let rm = BtRewardModel::new(array![[400.0, -400.0]]).unwrap();
        assert!(bt_loss(&rm, &single).unwrap() < 1e-300);

        assert!(matches!(
            bt_loss(&rm, &PreferenceDataset::default()),
            Err(Error::Domain(_))
        ));
        assert!(PreferenceDataset::new(vec![Comparison {
            prompt: 0,
            chosen: 1,
            rejected: 1
        }])
        .is_err());
    }

    fn random_instance(seed: u64) -> (BtRewardModel, PreferenceDataset) {
        let mut r = rng::stream(seed, &[]);
        let (n, k) = (r.random_range(1..5), r.random_range(2..6));
        let params = Array2::from_shape_fn((n, k), |_| r.random_range(-2.0..2.0));
        let pairs = (0..r.random_range(1..12))
            .map(|_| {
                let x = r.random_range(0..n);
                let a = r.random_range(0..k);
                let b = (a + r.random_range(1..k)) % k;
                Comparison {
                    prompt: x,
                    chosen: a,
                    rejected: b,
                }
            })
            .collect();
        (
            BtRewardModel::new(params).unwrap(),
            PreferenceDataset::new(pairs).unwrap(),
        )
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..50 {
            let (rm, data) = random_instance(seed);
            let analytic = bt_gradient(&rm, &data).unwrap();
            let mut numeric = Array2::zeros(analytic.dim());
            for idx in ndarray::indices(analytic.dim()) {
                let mut plus = rm.clone();
                plus.params[idx] += h;
                let mut minus = rm.clone();
                minus.params[idx] -= h;
                numeric[idx] =
                    (bt_loss(&plus, &data).unwrap() - bt_loss(&minus, &data).unwrap()) / (2.0 * h);
            }
            let scale = analytic
                .iter()
                .chain(&numeric)
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let err = analytic
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-6 * scale, "seed {seed}: err {err} scale {scale}");
        }
    }

    #[test]
    fn loss_ignores_per_prompt_offsets() {
        for seed in 0..20 {
            let (rm, data) = random_instance(seed);
            let mut shifted = rm.params.clone();
            for (x, mut row) in shifted.rows_mut().into_iter().enumerate() {
                row += 3.0 * x as f64 - 1.5;
            }
            let shifted = BtRewardModel::new(shifted).unwrap();
            let (a, b) = (
                bt_loss(&rm, &data).unwrap(),
                bt_loss(&shifted, &data).unwrap(),
            );
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_training_is_monotone() {
        let (_, data) = random_instance(7);
        let rm = BtRewardModel::zeros(space(4, 4));
        let data = PreferenceDataset::new(
            data.pairs()
                .iter()
                .filter(|c| c.prompt < 4 && c.chosen < 4 && c.rejected < 4)
                .copied()
                .chain([Comparison {
                    prompt: 0,
                    chosen: 3,
                    rejected: 1,
                }])
                .collect(),
        )
        .unwrap();
        let out = train_reward_model(&rm, &data, 200, 0.1).unwrap();
        assert!(out.model.is_trained());
        assert_eq!(out.loss_trace.len(), 200);
        assert!(out.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn separable_preferences_are_fit_exactly() {
        let mut r = rng::stream(11, &[]);
        let mut table = Array2::zeros((3, 5));
        for mut row in table.rows_mut() {
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut r);
            for (y, v) in perm.into_iter().enumerate() {
                row[y] = v as f64;
            }
        }
        let oracle = OracleReward::new(table).unwrap();
        let candidates: Vec<_> = (0..3)
            .flat_map(|x| (0..5).flat_map(move |a| ((a + 1)..5).map(move |b| (x, a, b))))
            .collect();
        let data = PreferenceDataset::label(&oracle, &candidates).unwrap();
        let out = train_reward_model(&BtRewardModel::zeros(space(3, 5)), &data, 500, 5.0).unwrap();
        assert_eq!(pairwise_accuracy(&out.model, &data).unwrap(), 1.0);
    }

    #[test]
    fn labels_ignore_reward_offsets() {
        let oracle = OracleReward::new(array![[0.2, 0.9, 0.4], [1.0, -1.0, 0.0]]).unwrap();
        let shifted = OracleReward::new(array![[10.2, 10.9, 10.4], [-4.0, -6.0, -5.0]]).unwrap();
        let candidates = [(0, 0, 1), (0, 2, 1), (1, 0, 2), (1, 1, 2), (0, 0, 2)];
        assert_eq!(
            PreferenceDataset::label(&oracle, &candidates).unwrap(),
            PreferenceDataset::label(&shifted, &candidates).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let data = PreferenceDataset::new(vec![Comparison {
            prompt: 0,
            chosen: 0,
            rejected: 1,
        }])
        .unwrap();
        // margin −∞ makes the very first loss infinite
        let rm = BtRewardModel::new(array![[-1e308, 1e308]]).unwrap();
        let err = train_reward_model(&rm, &data, 3, 0.1).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
    }
}
