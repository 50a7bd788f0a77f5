//! The mirror-basin counterexample fixture.
//!
//! A one-hidden-unit classifier on symmetric data (`class 1` iff `|x| > 1`)
//! has two mirror-image optima: one detects the positive arm, the other the
//! negative arm. Negating the input weight of a trained model lands exactly
//! in the opposite basin with identical loss, and the parameter average of
//! the two has a dead hidden unit: a constant predictor whose loss is well
//! above the members' mean. The fixture pins that instance as two snapshot
//! files plus a tiny CSV dataset.

use std::path::{Path, PathBuf};

use crate::aggregate::ma_nonconvex_probe;
use crate::data::{self, Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::loss::LossSelector;
use crate::net::{DenseNet, Layout, ParamVec};
use crate::optim::{train_step, OptState};
use crate::seedstream::{stream_rng, StreamDomain};
use crate::snapshot;

pub const MEMBER_A_FILE: &str = "mirror_member_a.json";
pub const MEMBER_B_FILE: &str = "mirror_member_b.json";
pub const DATA_FILE: &str = "mirror_data.csv";

/// Candidate init seeds tried in order; with one ReLU unit some inits die
/// (the unit never activates), so the builder takes the first seed whose
/// trained member yields the required margin.
const FIXTURE_SEEDS: [u64; 8] = [20, 21, 22, 23, 24, 25, 26, 27];
const TRAIN_STEPS: usize = 3000;
const MARGIN: f64 = 0.15;

/// Paths of a built fixture plus the probe values it was verified with.
#[derive(Debug, Clone)]
pub struct MirrorFixture {
    pub member_a: PathBuf,
    pub member_b: PathBuf,
    pub data: PathBuf,
    /// Mean cross entropy of the parameter-averaged model on the fixture
    /// data.
    pub averaged_loss: f64,
    /// Mean of the two members' cross entropies.
    pub mean_member_loss: f64,
}

/// The symmetric grid dataset: for every `(x, y)` the pair `(-x, y)` is also
/// present, half the points in each class.
pub fn mirror_dataset() -> Dataset {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..8 {
        // class 0 inside the unit interval, class 1 outside
        let inner = 0.1 + 0.1 * i as f64;
        let outer = 1.2 + 0.1 * i as f64;
        for x in [inner, -inner] {
            features.push(vec![x]);
            labels.push(0);
        }
        for x in [outer, -outer] {
            features.push(vec![x]);
            labels.push(1);
        }
    }
    Dataset::new(features, labels, 2).expect("fixed grid is valid")
}

/// Train one member into a basin from the given init seed.
fn train_member(data: &Dataset, seed: u64) -> Result<DenseNet> {
    let layout = Layout::new(vec![1, 1, 2])?;
    let mut net = DenseNet::init(
        layout.clone(),
        &mut stream_rng(seed, StreamDomain::Init, 0),
    );
    let mut opt = OptState::new(0.1, 0.9, 0.0, layout)?;
    let batch = data.as_batch();
    for _ in 0..TRAIN_STEPS {
        train_step(&mut net, &batch, &LossSelector::CrossEntropy, &mut opt)?;
    }
    Ok(net)
}

/// The mirror twin: negate the input->hidden weights so the new model's
/// output on `x` equals the original's on `-x`. On symmetric data both have
/// the same loss, and their parameter average has zero input weights.
pub fn mirror_params(params: &ParamVec) -> ParamVec {
    let mut mirrored = params.clone();
    let (w_off, b_off, _, _) = params.layout().layer_span(0);
    for v in &mut mirrored.values_mut()[w_off..b_off] {
        *v = -*v;
    }
    mirrored
}

/// Build, verify and write the fixture. Fails if no candidate seed produces
/// an instance where the averaged model loses by a clear margin.
pub fn build_mirror_fixture(out_dir: &Path) -> Result<MirrorFixture> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ds = mirror_dataset();
    let batch = ds.as_batch();

    let mut found = None;
    for seed in FIXTURE_SEEDS {
        let member_a = train_member(&ds, seed)?;
        let member_b = DenseNet::new(mirror_params(member_a.params()));
        let (averaged_loss, mean_member_loss) =
            ma_nonconvex_probe(&[member_a.params(), member_b.params()], &batch)?;
        if averaged_loss - mean_member_loss > MARGIN {
            found = Some((member_a, member_b, averaged_loss, mean_member_loss));
            break;
        }
    }
    let Some((member_a, member_b, averaged_loss, mean_member_loss)) = found else {
        return Err(Error::Config(
            "fixture construction failed: no candidate seed trained into a basin with a \
             clear averaging margin"
                .into(),
        ));
    };

    let member_a_path = out_dir.join(MEMBER_A_FILE);
    let member_b_path = out_dir.join(MEMBER_B_FILE);
    let data_path = out_dir.join(DATA_FILE);
    snapshot::save_net(&member_a, &member_a_path)?;
    snapshot::save_net(&member_b, &member_b_path)?;
    data::write_csv(&ds, &data_path)?;

    Ok(MirrorFixture {
        member_a: member_a_path,
        member_b: member_b_path,
        data: data_path,
        averaged_loss,
        mean_member_loss,
    })
}

/// Load a previously built fixture directory.
pub fn load_mirror_fixture(dir: &Path) -> Result<(ParamVec, ParamVec, Dataset)> {
    let a = snapshot::load(&dir.join(MEMBER_A_FILE))?;
    let b = snapshot::load(&dir.join(MEMBER_B_FILE))?;
    let ds = data::load_csv(&dir.join(DATA_FILE))?;
    Ok((a, b, ds))
}

/// The fixture dataset as a probe batch.
pub fn fixture_batch(ds: &Dataset) -> LabeledBatch {
    ds.as_batch()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::local_loss;

    #[test]
    fn dataset_is_symmetric_and_balanced() {
        let ds = mirror_dataset();
        assert_eq!(ds.len(), 32);
        assert_eq!(ds.class_counts(), vec![16, 16]);
        for i in 0..ds.len() {
            let x = ds.feature(i)[0];
            let twin = (0..ds.len())
                .find(|&j| (ds.feature(j)[0] + x).abs() < 1e-12 && ds.label(j) == ds.label(i));
            assert!(twin.is_some(), "no mirror twin for {x}");
        }
    }

    #[test]
    fn mirrored_member_has_equal_loss_on_symmetric_data() {
        let ds = mirror_dataset();
        let member = train_member(&ds, FIXTURE_SEEDS[0]).unwrap();
        let twin = DenseNet::new(mirror_params(member.params()));
        let batch = ds.as_batch();
        let a = local_loss(&member, &batch, None, 0.0).unwrap();
        let b = local_loss(&twin, &batch, None, 0.0).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn built_fixture_shows_the_averaging_failure() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = build_mirror_fixture(dir.path()).unwrap();
        assert!(
            fixture.averaged_loss - fixture.mean_member_loss > 0.1,
            "margin too small: {} vs {}",
            fixture.averaged_loss,
            fixture.mean_member_loss
        );
        let (a, b, ds) = load_mirror_fixture(dir.path()).unwrap();
        let (avg, mean) = ma_nonconvex_probe(&[&a, &b], &ds.as_batch()).unwrap();
        assert!((avg - fixture.averaged_loss).abs() < 1e-12);
        assert!((mean - fixture.mean_member_loss).abs() < 1e-12);
    }

    #[test]
    fn rebuilding_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_mirror_fixture(d1.path()).unwrap();
        build_mirror_fixture(d2.path()).unwrap();
        for file in [MEMBER_A_FILE, MEMBER_B_FILE, DATA_FILE] {
            let a = std::fs::read(d1.path().join(file)).unwrap();
            let b = std::fs::read(d2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between rebuilds");
        }
    }
}
