//! Synthetic datasets with planted structure and the multi-seed protocol
//! used to check the directional claims.

use mvfs_core::backbone::BackboneKind;
use mvfs_core::data::{
    random_logits, split, Dataset, GroundTruth, InformativeField, SyntheticMode, SyntheticSpec, SPLIT_RATIOS,
};
use mvfs_core::training::{Mode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Seeds of the five-run medians.
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub truth: GroundTruth,
}

pub fn materialize(spec: &SyntheticSpec, instances: usize) -> Result<Splits> {
    let (ds, truth) = spec.generate(instances)?;
    let (train, valid, test) = split(&ds, SPLIT_RATIOS, spec.seed)?;
    Ok(Splits {
        train,
        valid,
        test,
        truth,
    })
}

fn informative(fields: &[usize], card: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<InformativeField> {
    fields
        .iter()
        .map(|&field| InformativeField {
            field,
            logits: random_logits(card, strength, rng),
        })
        .collect()
}

/// Fields that carry label signal in [`planted_recovery`].
pub const RECOVERY_INFORMATIVE: [usize; 4] = [2, 7, 11, 16];

/// 20 fields, one mode, four informative fields, no label noise.
pub fn planted_recovery(seed: u64) -> SyntheticSpec {
    let card = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SyntheticSpec {
        cardinalities: vec![card; 20],
        mode_field: 19,
        modes: vec![SyntheticMode {
            selector_values: (1..=card).collect(),
            informative: informative(&RECOVERY_INFORMATIVE, card, 2.0, &mut rng),
        }],
        mode_field_weights: None,
        label_noise: 0.0,
        seed,
    }
}

/// Planted sets of the two modes of [`two_mode`].
pub const TWO_MODE_SETS: [[usize; 3]; 2] = [[0, 1, 2], [3, 4, 5]];

/// 10 fields; field 9 picks one of two modes with disjoint informative sets
/// of size three; fields 6 to 8 are noise.
pub fn two_mode(seed: u64) -> SyntheticSpec {
    let card = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = TWO_MODE_SETS
        .iter()
        .enumerate()
        .map(|(m, fields)| SyntheticMode {
            selector_values: (1..=card).filter(|v| (v - 1) % 2 == m).collect(),
            informative: informative(fields, card, 2.5, &mut rng),
        })
        .collect();
    SyntheticSpec {
        cardinalities: vec![card; 10],
        mode_field: 9,
        modes,
        mode_field_weights: None,
        label_noise: 0.0,
        seed,
    }
}

/// Field whose value frequencies define the groups in [`minor_group`].
pub const MINOR_GROUP_FIELD: usize = 9;

/// Like [`two_mode`], but nine frequent values of field 9 (97% of the
/// mass) select the first mode and three rare values select the second.
pub fn minor_group(seed: u64) -> SyntheticSpec {
    let card = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cardinalities = vec![8; 10];
    cardinalities[MINOR_GROUP_FIELD] = card;
    let modes = vec![
        SyntheticMode {
            selector_values: (1..=9).collect(),
            informative: informative(&TWO_MODE_SETS[0], 8, 2.5, &mut rng),
        },
        SyntheticMode {
            selector_values: (10..=12).collect(),
            informative: informative(&TWO_MODE_SETS[1], 8, 2.5, &mut rng),
        },
    ];
    let mut weights = vec![0.97 / 9.0; 9];
    weights.extend([0.01; 3]);
    SyntheticSpec {
        cardinalities,
        mode_field: MINOR_GROUP_FIELD,
        modes,
        mode_field_weights: Some(weights),
        label_noise: 0.0,
        seed,
    }
}

/// Instances drawn for each scenario.
pub const RECOVERY_INSTANCES: usize = 50_000;
pub const TWO_MODE_INSTANCES: usize = 50_000;
pub const MINOR_GROUP_INSTANCES: usize = 200_000;

/// Training setup of the synthetic runs.
pub fn synthetic_config(mode: Mode, backbone: BackboneKind, k: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        l2: 1e-6,
        batch_size: 64,
        dim: 8,
        k,
        threshold: 0.1,
        warmup_epochs: 3,
        max_epochs: 20,
        patience: 3,
        seed,
        mode,
        backbone,
    }
}

/// Runs `f` once per seed on separate threads, keeping seed order.
pub fn per_seed<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed run panicked"))
            .collect()
    })
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
