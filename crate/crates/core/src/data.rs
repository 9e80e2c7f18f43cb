//! Datasets and member/non-member splits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(MiaError::dim("features must be a 2-D [n, d] tensor"));
        }
        if features.rows() != labels.len() {
            return Err(MiaError::dim(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(MiaError::arg(format!("label {bad} >= {num_classes} classes")));
        }
        if !features.is_finite() {
            return Err(MiaError::Numeric("dataset features contain non-finite values".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn example(&self, i: usize) -> Tensor {
        Tensor::vector(self.row(i).to_vec())
    }

    /// Copies the rows at `idx` into one flat `[idx.len(), d]` buffer.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

/// Binary records drawn around `k` random prototypes.
///
/// Each prototype is a uniform random bit vector; a record copies its
/// class prototype and flips every bit independently with probability
/// `cluster_spread`. Classes are assigned round-robin and then shuffled, so
/// class counts differ by at most one.
pub fn synth_purchase_like(n: usize, d: usize, k: usize, cluster_spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(MiaError::arg(format!(
            "need n >= k >= 2 and d >= 1, got n={n}, k={k}, d={d}"
        )));
    }
    if !(0.0..=1.0).contains(&cluster_spread) {
        return Err(MiaError::arg(format!("cluster_spread {cluster_spread} outside [0, 1]")));
    }
    let mut rng = rng_for(seed, &[stream::DATA]);
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for &bit in &prototypes[y] {
            let flip = rng.gen::<f64>() < cluster_spread;
            data.push(if flip { 1.0 - bit } else { bit });
        }
    }
    Dataset::new(
        Tensor::matrix(n, d, data)?,
        labels,
        k,
        format!("synthetic-purchase-n{n}-d{d}-k{k}"),
    )
}

/// Which column holds the label, and how many classes there are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub num_classes: usize,
}

/// Reads a headed numeric CSV. Row numbers in errors are 1-based data rows.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(std::fs::File::open(path)?);
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == schema.label_column)
        .ok_or_else(|| MiaError::Format {
            row: 0,
            msg: format!("no column named {:?}", schema.label_column),
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(MiaError::Format {
            row: 0,
            msg: "no feature columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| MiaError::Format {
            row,
            msg: e.to_string(),
        })?;
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_col {
                let y: usize = cell.parse().map_err(|_| MiaError::Format {
                    row,
                    msg: format!("label {cell:?} is not a class index"),
                })?;
                if y >= schema.num_classes {
                    return Err(MiaError::Format {
                        row,
                        msg: format!("label {y} >= {} classes", schema.num_classes),
                    });
                }
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| MiaError::Format {
                    row,
                    msg: format!("column {c}: {cell:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(MiaError::Format {
                        row,
                        msg: format!("column {c}: non-finite value"),
                    });
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(MiaError::Format {
            row: 0,
            msg: "file has no data rows".into(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels, schema.num_classes, name)
}

/// Writes `ds` with feature columns `f0..f{d-1}` followed by `label`.
///
/// Floats use Rust's shortest round-trip formatting, so `load_csv` reads
/// back identical values.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Requested sizes for [`make_split`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub target_train: usize,
    pub target_test: usize,
    pub attack_train_members: usize,
    pub attack_train_nonmembers: usize,
    pub attack_test_members: usize,
    pub attack_test_nonmembers: usize,
    #[serde(default)]
    pub finetune: usize,
}

impl SplitSizes {
    /// Every size divided by `factor` (rounded down, at least 1 where the
    /// original was non-zero).
    pub fn scaled_down(&self, factor: usize) -> SplitSizes {
        let s = |v: usize| if v == 0 { 0 } else { (v / factor).max(1) };
        SplitSizes {
            target_train: s(self.target_train),
            target_test: s(self.target_test),
            attack_train_members: s(self.attack_train_members),
            attack_train_nonmembers: s(self.attack_train_nonmembers),
            attack_test_members: s(self.attack_test_members),
            attack_test_nonmembers: s(self.attack_test_nonmembers),
            finetune: s(self.finetune),
        }
    }
}

/// Index sets for one stand-alone or fine-tuning experiment.
///
/// Members are drawn from `target_train`; non-members from every record
/// outside `target_train` and `finetune` (the target test set included).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub attack_train_members: Vec<usize>,
    pub attack_train_nonmembers: Vec<usize>,
    pub attack_test_members: Vec<usize>,
    pub attack_test_nonmembers: Vec<usize>,
    #[serde(default)]
    pub finetune: Vec<usize>,
}

impl SplitPlan {
    /// Checks every disjointness and balance rule.
    pub fn validate(&self, n: usize) -> Result<()> {
        let set = |v: &[usize]| v.iter().copied().collect::<HashSet<_>>();
        let all = [
            &self.target_train,
            &self.target_test,
            &self.attack_train_members,
            &self.attack_train_nonmembers,
            &self.attack_test_members,
            &self.attack_test_nonmembers,
            &self.finetune,
        ];
        for v in all {
            if v.iter().any(|&i| i >= n) {
                return Err(MiaError::arg("split index out of range"));
            }
            if set(v).len() != v.len() {
                return Err(MiaError::arg("split index set contains duplicates"));
            }
        }
        let d = set(&self.target_train);
        let delta = set(&self.finetune);
        let disjoint = |a: &HashSet<usize>, b: &[usize]| b.iter().all(|i| !a.contains(i));
        if !disjoint(&d, &self.target_test) || !disjoint(&d, &self.finetune) {
            return Err(MiaError::arg("target train overlaps test or fine-tune set"));
        }
        if !self.attack_train_members.iter().all(|i| d.contains(i))
            || !self.attack_test_members.iter().all(|i| d.contains(i))
        {
            return Err(MiaError::arg("attack members must come from target train"));
        }
        for nm in [&self.attack_train_nonmembers, &self.attack_test_nonmembers] {
            if !disjoint(&d, nm) || !disjoint(&delta, nm) {
                return Err(MiaError::arg("attack non-members must lie outside the training data"));
            }
        }
        if !disjoint(&set(&self.attack_train_members), &self.attack_test_members)
            || !disjoint(&set(&self.attack_train_nonmembers), &self.attack_test_nonmembers)
        {
            return Err(MiaError::arg("attack test sets overlap attack train sets"));
        }
        if self.attack_test_members.len() != self.attack_test_nonmembers.len() {
            return Err(MiaError::arg("attack test members and non-members differ in size"));
        }
        Ok(())
    }
}

/// Uniformly random disjoint assignment of `n` records, deterministic in
/// `seed`.
pub fn make_split(n: usize, sizes: &SplitSizes, seed: u64) -> Result<SplitPlan> {
    let base = sizes.target_train + sizes.finetune + sizes.target_test;
    if base > n {
        return Err(MiaError::arg(format!(
            "train {} + fine-tune {} + test {} exceeds {n} records by {}",
            sizes.target_train,
            sizes.finetune,
            sizes.target_test,
            base - n
        )));
    }
    let members = sizes.attack_train_members + sizes.attack_test_members;
    if members > sizes.target_train {
        return Err(MiaError::arg(format!(
            "attack members need {members} records but target train has {} (deficit {})",
            sizes.target_train,
            members - sizes.target_train
        )));
    }
    let outside = n - sizes.target_train - sizes.finetune;
    let nonmembers = sizes.attack_train_nonmembers + sizes.attack_test_nonmembers;
    if nonmembers > outside {
        return Err(MiaError::arg(format!(
            "attack non-members need {nonmembers} records but only {outside} lie outside training (deficit {})",
            nonmembers - outside
        )));
    }
    if sizes.attack_test_members != sizes.attack_test_nonmembers {
        return Err(MiaError::arg("attack test members and non-members must be equal in size"));
    }
    let mut rng = rng_for(seed, &[stream::SPLIT]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let (train, rest) = perm.split_at(sizes.target_train);
    let (finetune, rest) = rest.split_at(sizes.finetune);
    let test = &rest[..sizes.target_test];

    let mut member_pool = train.to_vec();
    member_pool.shuffle(&mut rng);
    let (atm, rest_m) = member_pool.split_at(sizes.attack_train_members);
    let atest_m = &rest_m[..sizes.attack_test_members];

    let mut nonmember_pool = rest.to_vec();
    nonmember_pool.shuffle(&mut rng);
    let (atn, rest_n) = nonmember_pool.split_at(sizes.attack_train_nonmembers);
    let atest_n = &rest_n[..sizes.attack_test_nonmembers];

    let plan = SplitPlan {
        target_train: train.to_vec(),
        target_test: test.to_vec(),
        attack_train_members: atm.to_vec(),
        attack_train_nonmembers: atn.to_vec(),
        attack_test_members: atest_m.to_vec(),
        attack_test_nonmembers: atest_n.to_vec(),
        finetune: finetune.to_vec(),
    };
    plan.validate(n)?;
    Ok(plan)
}

/// Attack sizes for a federated run, per the attacked party.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedSplitSizes {
    pub num_participants: usize,
    pub per_participant: usize,
    pub target_test: usize,
    pub attack_train_members: usize,
    pub attack_train_nonmembers: usize,
    pub attack_test_members: usize,
    pub attack_test_nonmembers: usize,
    /// Participants draw from a shared pool of this many records instead of
    /// receiving disjoint shares.
    #[serde(default)]
    pub overlap_pool: Option<usize>,
}

/// Participant shares plus the records never used in training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedSplitPlan {
    pub participants: Vec<Vec<usize>>,
    pub target_test: Vec<usize>,
    /// Records outside every participant's share.
    pub outside: Vec<usize>,
}

pub fn make_fed_split(n: usize, sizes: &FedSplitSizes, seed: u64) -> Result<FedSplitPlan> {
    let parties = sizes.num_participants;
    if parties < 2 || sizes.per_participant == 0 {
        return Err(MiaError::arg("federated split needs >= 2 participants with data"));
    }
    let mut rng = rng_for(seed, &[stream::SPLIT, stream::FED]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let used = match sizes.overlap_pool {
        None => parties * sizes.per_participant,
        Some(pool) => {
            if pool < sizes.per_participant {
                return Err(MiaError::arg("overlap pool smaller than a participant's share"));
            }
            pool
        }
    };
    if used > n {
        return Err(MiaError::arg(format!(
            "participants need {used} records but only {n} exist (deficit {})",
            used - n
        )));
    }
    let (train, outside) = perm.split_at(used);
    let participants: Vec<Vec<usize>> = match sizes.overlap_pool {
        None => train.chunks(sizes.per_participant).map(<[usize]>::to_vec).collect(),
        Some(_) => (0..parties)
            .map(|_| {
                let mut share = train.to_vec();
                share.shuffle(&mut rng);
                share.truncate(sizes.per_participant);
                share
            })
            .collect(),
    };
    if sizes.target_test > outside.len() {
        return Err(MiaError::arg(format!(
            "test set of {} exceeds the {} records outside training",
            sizes.target_test,
            outside.len()
        )));
    }
    Ok(FedSplitPlan {
        participants,
        target_test: outside[..sizes.target_test].to_vec(),
        outside: outside.to_vec(),
    })
}

/// Draws disjoint attack member/non-member sets from `members` and
/// `nonmembers` pools.
pub fn draw_attack_sets(
    members: &[usize],
    nonmembers: &[usize],
    sizes: &FedSplitSizes,
    seed: u64,
) -> Result<SplitPlan> {
    let need_m = sizes.attack_train_members + sizes.attack_test_members;
    let need_n = sizes.attack_train_nonmembers + sizes.attack_test_nonmembers;
    if need_m > members.len() || need_n > nonmembers.len() {
        return Err(MiaError::arg(format!(
            "attack sets need {need_m} members / {need_n} non-members, pools hold {} / {}",
            members.len(),
            nonmembers.len()
        )));
    }
    if sizes.attack_test_members != sizes.attack_test_nonmembers {
        return Err(MiaError::arg("attack test members and non-members must be equal in size"));
    }
    let mut rng = rng_for(seed, &[stream::SPLIT, stream::ATTACK]);
    let mut m = members.to_vec();
    let mut nm = nonmembers.to_vec();
    m.shuffle(&mut rng);
    nm.shuffle(&mut rng);
    Ok(SplitPlan {
        target_train: members.to_vec(),
        target_test: Vec::new(),
        attack_train_members: m[..sizes.attack_train_members].to_vec(),
        attack_test_members: m[sizes.attack_train_members..need_m].to_vec(),
        attack_train_nonmembers: nm[..sizes.attack_train_nonmembers].to_vec(),
        attack_test_nonmembers: nm[sizes.attack_train_nonmembers..need_n].to_vec(),
        finetune: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(train: usize, test: usize, a: [usize; 4]) -> SplitSizes {
        SplitSizes {
            target_train: train,
            target_test: test,
            attack_train_members: a[0],
            attack_train_nonmembers: a[1],
            attack_test_members: a[2],
            attack_test_nonmembers: a[3],
            finetune: 0,
        }
    }

    #[test]
    fn zero_spread_records_equal_prototypes() {
        let ds = synth_purchase_like(200, 30, 5, 0.0, 3).unwrap();
        // one distinct row per class and a perfect nearest-prototype classifier
        let mut protos: Vec<Option<Vec<f64>>> = vec![None; 5];
        for i in 0..ds.len() {
            let y = ds.labels[i];
            match &protos[y] {
                None => protos[y] = Some(ds.row(i).to_vec()),
                Some(p) => assert_eq!(p.as_slice(), ds.row(i)),
            }
        }
        let protos: Vec<Vec<f64>> = protos.into_iter().map(Option::unwrap).collect();
        let correct = (0..ds.len())
            .filter(|&i| {
                let dist = |p: &Vec<f64>| p.iter().zip(ds.row(i)).filter(|(a, b)| a != b).count();
                let best = (0..5).min_by_key(|&c| dist(&protos[c])).unwrap();
                best == ds.labels[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn shape_and_determinism() {
        let a = synth_purchase_like(100, 12, 10, 0.3, 9).unwrap();
        assert_eq!(a.len(), 100);
        assert!(a.labels.iter().all(|&y| y < 10));
        assert_eq!(a, synth_purchase_like(100, 12, 10, 0.3, 9).unwrap());
        assert_ne!(a, synth_purchase_like(100, 12, 10, 0.3, 10).unwrap());
        assert!(synth_purchase_like(5, 12, 10, 0.3, 9).is_err());
        assert!(synth_purchase_like(50, 0, 10, 0.3, 9).is_err());
    }

    #[test]
    fn class_balance() {
        let (n, k) = (2000, 20);
        let ds = synth_purchase_like(n, 8, k, 0.4, 1).unwrap();
        let mut counts = vec![0usize; k];
        ds.labels.iter().for_each(|&y| counts[y] += 1);
        let expect = (n / k) as f64;
        for c in counts {
            assert!((c as f64 - expect).abs() <= 3.0 * expect.sqrt());
        }
    }

    #[test]
    fn valid_split_holds_invariants() {
        let plan = make_split(100, &sizes(50, 50, [20, 20, 25, 25]), 4).unwrap();
        plan.validate(100).unwrap();
        assert_eq!(plan.target_train.len(), 50);
        assert_eq!(plan.attack_test_members.len(), 25);
    }

    #[test]
    fn infeasible_split_reports_deficit() {
        let err = make_split(100, &sizes(60, 60, [10, 10, 10, 10]), 4).unwrap_err();
        assert!(err.to_string().contains("by 20"), "{err}");
        let err = make_split(100, &sizes(50, 10, [30, 10, 30, 30]), 4).unwrap_err();
        assert!(err.to_string().contains("deficit 10"), "{err}");
    }

    #[test]
    fn scaled_table_one_purchase_row() {
        let full = sizes(20_000, 50_000, [10_000, 10_000, 10_000, 10_000]);
        let s = full.scaled_down(100);
        assert_eq!(s, sizes(200, 500, [100, 100, 100, 100]));
        let plan = make_split(900, &s, 1).unwrap();
        plan.validate(900).unwrap();
    }

    #[test]
    fn fed_split_disjoint_and_overlapping() {
        let s = FedSplitSizes {
            num_participants: 4,
            per_participant: 50,
            target_test: 40,
            attack_train_members: 10,
            attack_train_nonmembers: 10,
            attack_test_members: 10,
            attack_test_nonmembers: 10,
            overlap_pool: None,
        };
        let p = make_fed_split(400, &s, 2).unwrap();
        let all: HashSet<usize> = p.participants.iter().flatten().copied().collect();
        assert_eq!(all.len(), 200);
        assert!(p.outside.iter().all(|i| !all.contains(i)));

        let o = make_fed_split(400, &FedSplitSizes { overlap_pool: Some(120), ..s.clone() }, 2).unwrap();
        let all: HashSet<usize> = o.participants.iter().flatten().copied().collect();
        assert!(all.len() <= 120);
        assert!(o.participants.iter().all(|p| p.len() == 50));
        let attack = draw_attack_sets(&p.participants[0], &p.outside, &s, 3).unwrap();
        assert_eq!(attack.attack_test_members.len(), 10);
    }
}
