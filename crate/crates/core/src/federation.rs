//! Federated rounds: broadcast, local training, aggregation and head relay.

use std::fmt;
use std::thread;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::{self, Sample, SiteData};
use crate::error::{Error, Result};
use crate::hc::HeadCollection;
use crate::losses::LossBreakdown;
use crate::metrics::{ReportBuilder, SiteReport};
use crate::model::{self, Calibration};
use crate::nn::{init_params, Group, ModelProfile, ParamSet};
use crate::optim::Adam;
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Training regime of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Every site trains alone.
    Local,
    /// Everything averaged, single head, no calibration.
    FedAvg,
    /// Body averaged, heads personal, no calibration.
    FedRepHead,
    LcFed,
    LcFedPcsOnly,
    LcFedHcOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Local,
        Mode::FedAvg,
        Mode::FedRepHead,
        Mode::LcFed,
        Mode::LcFedPcsOnly,
        Mode::LcFedHcOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::FedAvg => "fedavg",
            Mode::FedRepHead => "fedrep-head",
            Mode::LcFed => "lcfed",
            Mode::LcFedPcsOnly => "lcfed-pcs-only",
            Mode::LcFedHcOnly => "lcfed-hc-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }

    pub fn pcs(self) -> bool {
        matches!(self, Mode::LcFed | Mode::LcFedPcsOnly)
    }

    pub fn hc(self) -> bool {
        matches!(self, Mode::LcFed | Mode::LcFedHcOnly)
    }

    pub fn shares_heads(self) -> bool {
        self == Mode::FedAvg
    }

    pub fn aggregates(self) -> bool {
        self != Mode::Local
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resolved training switches and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub calibration: Calibration,
    /// Groups averaged by the server; empty means no aggregation.
    pub shared: Vec<Group>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub master_seed: u64,
    /// Parallel client workers; 1 runs clients one after another.
    pub workers: usize,
    pub threshold: f64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Config("batch, epochs and workers must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} is not a valid step size", self.lr)));
        }
        Ok(())
    }
}

/// Parameters and optimizer state owned by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteState<T> {
    pub params: ParamSet<T>,
    pub opt: Adam<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState<T> {
    /// Completed rounds.
    pub round: u64,
    pub profile: ModelProfile,
    /// Server copy of the shared groups.
    pub global: ParamSet<T>,
    pub sites: Vec<SiteState<T>>,
    /// Coarse heads as of the end of the last completed round.
    pub heads: HeadCollection<T>,
}

impl<T: Real> FederationState<T> {
    /// Every site starts from the same initialization drawn from the master seed.
    pub fn init(profile: &ModelProfile, settings: &TrainSettings) -> Result<Self> {
        let params: ParamSet<T> = init_params(profile, &mut seed::rng(&[settings.master_seed, 0x1417]))?;
        let sites: Vec<SiteState<T>> = (0..profile.sites)
            .map(|_| SiteState {
                params: params.clone(),
                opt: Adam::new(settings.lr),
            })
            .collect();
        let heads = model::collect_heads(&sites.iter().map(|s| s.params.clone()).collect::<Vec<_>>(), 0)?;
        Ok(Self {
            round: 0,
            profile: profile.clone(),
            global: params.subset(&settings.shared),
            sites,
            heads,
        })
    }

    /// Hash over the round counter and every parameter and moment buffer.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.round.to_le_bytes());
        h.update(self.global.digest());
        for s in &self.sites {
            h.update(s.params.digest());
            h.update(s.opt.step.to_le_bytes());
            for (name, m) in &s.opt.moments {
                h.update(name.as_bytes());
                for t in [&m.m, &m.v] {
                    let mut buf = Vec::new();
                    for &v in t.data() {
                        v.write_le(&mut buf);
                    }
                    h.update(&buf);
                }
            }
        }
        crate::nn::hex(&h.finalize())
    }
}

/// Result of one site's local training in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub site: usize,
    pub params: ParamSet<T>,
    pub opt: Adam<T>,
    pub stats: LossBreakdown,
    pub steps: usize,
}

/// `E` epochs of minibatch Adam on the site's training split, starting from
/// `params` (whose shared groups already hold the global values).
#[allow(clippy::too_many_arguments)]
pub fn local_update<T: Real>(
    site: usize,
    params: &ParamSet<T>,
    opt: &Adam<T>,
    profile: &ModelProfile,
    heads: &HeadCollection<T>,
    train: &[Sample],
    settings: &TrainSettings,
    round: u64,
) -> Result<ClientUpdate<T>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("site {site} has no training samples")));
    }
    let mut params = params.clone();
    let mut opt = opt.clone();
    opt.lr = settings.lr;
    let mut rng = seed::rng(&[settings.master_seed, site as u64, round]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stats = Vec::new();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(settings.batch) {
            let (x, g) = data::batch::<T>(train, idx)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(x);
            let g = tape.constant(g);
            let fwd = model::forward(
                &mut tape,
                &bound,
                profile.stages(),
                site,
                profile.sites,
                &settings.calibration,
                heads,
                x,
            )?;
            let (joint, br) = model::objective(&mut tape, &bound, &fwd, g, site, profile.sites, settings.lambda)?;
            tape.backward(joint)?;
            let mut grads = IndexMap::new();
            for (name, v) in bound.iter() {
                let gr = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                grads.insert(name.to_string(), gr);
            }
            opt.step(&mut params, &grads)?;
            stats.push(br);
        }
    }
    Ok(ClientUpdate {
        site,
        params,
        opt,
        steps: stats.len(),
        stats: LossBreakdown::mean(&stats, settings.lambda),
    })
}

/// Unweighted elementwise mean of parameter sets with identical layout,
/// accumulated as offsets from the first set.
pub fn fedavg<T: Real>(sets: &[&ParamSet<T>]) -> Result<ParamSet<T>> {
    let first = *sets.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    for s in sets {
        if s.len() != first.len() {
            return Err(Error::Shape("parameter sets differ in size".into()));
        }
    }
    let k = T::c(sets.len() as f64);
    let mut out = first.clone();
    for (name, p) in out.iter_mut() {
        let mut acc = vec![T::zero(); p.value.len()];
        for s in &sets[1..] {
            let q = s
                .get(name)
                .ok_or_else(|| Error::Shape(format!("parameter {name} missing from one site")))?;
            if q.value.shape() != p.value.shape() || q.group != p.group {
                return Err(Error::Shape(format!("parameter {name} differs between sites")));
            }
            for ((a, &v), &x0) in acc.iter_mut().zip(q.value.data()).zip(p.value.data()) {
                *a += v - x0;
            }
        }
        for (d, a) in p.value.data_mut().iter_mut().zip(acc) {
            *d += a / k;
        }
    }
    Ok(out)
}

/// Runs `f(k)` for every site, on `workers` threads, returning results in
/// site order.
fn for_each_site<R: Send>(sites: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if workers <= 1 || sites <= 1 {
        return (0..sites).map(f).collect();
    }
    let workers = workers.min(sites);
    let mut slots: Vec<Option<R>> = (0..sites).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..sites).step_by(workers).map(|k| (k, f(k))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("client worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every site ran")).collect()
}

/// One full round. On any client error the state is left untouched.
pub fn run_round<T: Real>(state: &mut FederationState<T>, datasets: &[SiteData], settings: &TrainSettings) -> Result<Vec<ClientUpdate<T>>> {
    let k = state.sites.len();
    if datasets.len() != k {
        return Err(Error::Invalid(format!("{} datasets for {k} sites", datasets.len())));
    }
    let st: &FederationState<T> = state;
    let results = for_each_site(k, settings.workers, |i| {
        local_update(
            i,
            &st.sites[i].params,
            &st.sites[i].opt,
            &st.profile,
            &st.heads,
            &datasets[i].train,
            settings,
            st.round,
        )
    });
    let updates: Vec<ClientUpdate<T>> = results.into_iter().collect::<Result<_>>()?;
    let mut new_params: Vec<ParamSet<T>> = updates.iter().map(|u| u.params.clone()).collect();
    let global = if settings.shared.is_empty() {
        ParamSet::new()
    } else {
        let shared: Vec<ParamSet<T>> = new_params.iter().map(|p| p.subset(&settings.shared)).collect();
        let global = fedavg(&shared.iter().collect::<Vec<_>>())?;
        for p in new_params.iter_mut() {
            p.overwrite_from(&global)?;
        }
        global
    };
    let heads = model::collect_heads(&new_params, state.round + 1)?;
    state.global = global;
    for ((s, p), u) in state.sites.iter_mut().zip(new_params).zip(&updates) {
        s.params = p;
        s.opt = u.opt.clone();
    }
    state.heads = heads;
    state.round += 1;
    Ok(updates)
}

/// Thresholded metrics of one site's model on `test`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_site<T: Real>(
    params: &ParamSet<T>,
    site: usize,
    profile: &ModelProfile,
    heads: &HeadCollection<T>,
    calibration: &Calibration,
    test: &[Sample],
    threshold: f64,
    batch: usize,
) -> Result<SiteReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset(format!("site {site} has no test samples")));
    }
    let mut report = ReportBuilder::new(profile.classes);
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, g) = data::batch::<T>(test, chunk)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(x);
        let fwd = model::forward(&mut tape, &bound, profile.stages(), site, profile.sites, calibration, heads, x)?;
        let pred = tape.value(fwd.prediction());
        let (b, n, h, w) = pred.dims4()?;
        for i in 0..b {
            let r = i * n * h * w..(i + 1) * n * h * w;
            let p = Tensor::new(&[n, h, w], pred.data()[r.clone()].to_vec())?;
            let t = Tensor::new(&[n, h, w], g.data()[r].to_vec())?;
            report.add(&p, &t, threshold)?;
        }
    }
    report.finish()
}

/// Reports of all sites on their test splits, evaluated with the state's
/// current parameters and relayed heads.
pub fn evaluate_all<T: Real>(state: &FederationState<T>, datasets: &[SiteData], settings: &TrainSettings) -> Result<Vec<SiteReport>> {
    for_each_site(state.sites.len(), settings.workers, |k| {
        evaluate_site(
            &state.sites[k].params,
            k,
            &state.profile,
            &state.heads,
            &settings.calibration,
            &datasets[k].test,
            settings.threshold,
            settings.batch,
        )
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{benchmark, BenchmarkSpec};
    use crate::hc::HcSettings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(mode: Mode) -> TrainSettings {
        let mut shared = vec![];
        if mode.aggregates() {
            shared.push(Group::BaseBody);
            if mode.pcs() {
                shared.push(Group::PcsGenerator);
            }
            if mode.shares_heads() {
                shared.push(Group::Head);
            }
        }
        TrainSettings {
            calibration: Calibration {
                pcs: mode.pcs(),
                hc: mode.hc(),
                hc_settings: HcSettings::default(),
            },
            shared,
            lr: 1e-3,
            batch: 3,
            epochs: 1,
            lambda: 0.1,
            master_seed: 5,
            workers: 1,
            threshold: 0.5,
        }
    }

    fn tiny(sites: usize) -> Vec<SiteData> {
        benchmark(&BenchmarkSpec {
            sites,
            samples_per_site: 5,
            size: (16, 16),
            classes: 1,
            seed: 1,
        })
        .unwrap()
    }

    fn profile(mode: Mode, sites: usize) -> ModelProfile {
        let s = settings(mode);
        model::profile_for(&[2, 4], 1, sites, &s.calibration)
    }

    fn random_set(seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for (name, shape) in [("a", vec![2, 3]), ("b", vec![4])] {
            let n: usize = shape.iter().product();
            ps.insert(name, Group::BaseBody, Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .unwrap();
        }
        ps
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.as_str()).unwrap(), m);
        }
        assert!(Mode::parse("fedprox").is_err());
    }

    #[test]
    fn fedavg_identity_and_symmetry() {
        let a = random_set(1);
        assert_eq!(fedavg(&[&a, &a, &a]).unwrap(), a);
        let mut neg = a.clone();
        for (_, p) in neg.iter_mut() {
            p.value = p.value.map(|v| -v);
        }
        let z = fedavg(&[&a, &neg]).unwrap();
        assert!(z.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
        assert!(fedavg::<f64>(&[]).is_err());
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut s = settings(Mode::LcFed);
        s.lr = 0.0;
        let prof = profile(Mode::LcFed, 2);
        let data = tiny(2);
        let st = FederationState::<f64>::init(&prof, &s).unwrap();
        let u = local_update(0, &st.sites[0].params, &st.sites[0].opt, &prof, &st.heads, &data[0].train, &s, 0).unwrap();
        assert_eq!(u.params, st.sites[0].params);
        assert_eq!(u.steps, 2);
    }

    #[test]
    fn round_shares_body_and_keeps_heads() {
        let s = settings(Mode::LcFed);
        let prof = profile(Mode::LcFed, 3);
        let data = tiny(3);
        let mut st = FederationState::<f64>::init(&prof, &s).unwrap();
        run_round(&mut st, &data, &s).unwrap();
        assert_eq!(st.round, 1);
        assert_eq!(st.heads.round, 1);
        assert!(st.global.iter().all(|(_, p)| p.group != Group::Head));
        for site in &st.sites {
            for (name, p) in st.global.iter() {
                assert_eq!(&site.params.get(name).unwrap().value, &p.value);
            }
        }
        let h0 = st.sites[0].params.tensor("head.coarse.weight").unwrap();
        let h1 = st.sites[1].params.tensor("head.coarse.weight").unwrap();
        assert_ne!(h0, h1);
    }

    #[test]
    fn failed_round_is_atomic() {
        let s = settings(Mode::LcFed);
        let prof = profile(Mode::LcFed, 2);
        let mut data = tiny(2);
        data[1].train.clear();
        let mut st = FederationState::<f64>::init(&prof, &s).unwrap();
        let before = st.clone();
        assert!(matches!(run_round(&mut st, &data, &s), Err(Error::EmptyDataset(_))));
        assert_eq!(st, before);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut s = settings(Mode::LcFed);
        let prof = profile(Mode::LcFed, 3);
        let data = tiny(3);
        let mut a = FederationState::<f64>::init(&prof, &s).unwrap();
        let mut b = a.clone();
        run_round(&mut a, &data, &s).unwrap();
        s.workers = 3;
        run_round(&mut b, &data, &s).unwrap();
        assert_eq!(a.digest(), b.digest());
        let ra = evaluate_all(&a, &data, &s).unwrap();
        s.workers = 1;
        assert_eq!(ra, evaluate_all(&b, &data, &s).unwrap());
    }
}
