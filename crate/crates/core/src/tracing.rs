//! Recovering identities from degraded speech and scoring the result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{MelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::id_vae::{average_tiles, IdDecoder};
use crate::speaker::{SpeakerEmbedding, SpeakerRegistry};
use crate::training::mel_tensor;

/// Invert a (possibly degraded) chunk, average the payload tiles and decode.
pub fn recover_embedding(
    degraded: &Waveform,
    inverter: &FlowModel,
    decoder: &IdDecoder,
    mel: &MelExtractor,
) -> Result<SpeakerEmbedding> {
    let m = mel.compute(degraded)?;
    let x = Tensor::from_slice(degraded.samples(), (1, degraded.len()), &Device::Cpu)?;
    let (z, _) = inverter.invert(&x, &mel_tensor(&[&m], DType::F32)?)?;
    let v = decoder.decode(&average_tiles(&z)?)?;
    SpeakerEmbedding::from_raw(v.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationDecision {
    /// Set iff `best_score > threshold`.
    pub claimed: Option<String>,
    pub best_id: String,
    pub best_score: f64,
    pub threshold: f64,
}

/// Claim the most similar enrolled speaker when its cosine beats `threshold`.
pub fn verify_speaker(v: &SpeakerEmbedding, registry: &SpeakerRegistry, threshold: f64) -> Result<VerificationDecision> {
    let mut best: Option<(&String, f64)> = None;
    for (id, e) in registry.iter() {
        let s = v.cosine(&e.embedding);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    let (id, score) = best.ok_or_else(|| Error::Enrollment("registry is empty".into()))?;
    Ok(VerificationDecision {
        claimed: (score > threshold).then(|| id.clone()),
        best_id: id.clone(),
        best_score: score,
        threshold,
    })
}

/// Speech-level decision: at least `⌊N/2⌋ + 1` chunks claim `truth`.
pub fn chunk_vote(decisions: &[VerificationDecision], truth: &str) -> Result<bool> {
    let n = decisions.len();
    if n % 2 == 0 {
        return Err(Error::Protocol(format!("chunk voting needs an odd number of chunks, got {n}")));
    }
    let hits = decisions.iter().filter(|d| d.claimed.as_deref() == Some(truth)).count();
    Ok(hits > n / 2)
}

/// Majority-vote accuracy over `n` independent chunks with accuracy `p`.
pub fn vote_accuracy(p: f64, n: usize) -> f64 {
    let mut total = 0.0;
    for k in n / 2 + 1..=n {
        total += binomial(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
    }
    total
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Monte-Carlo estimate of [`vote_accuracy`] and its standard error.
pub fn simulate_vote_accuracy(p: f64, n: usize, trials: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let wins = (0..trials)
        .filter(|_| (0..n).filter(|_| rng.random_bool(p)).count() > n / 2)
        .count();
    let est = wins as f64 / trials as f64;
    (est, (est * (1.0 - est) / trials as f64).sqrt())
}

fn check_scores(genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Parameter("genuine and impostor scores must be non-empty".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores must be finite".into()));
    }
    Ok(())
}

/// Fraction of impostor scores accepted (`> t`) and genuine scores rejected.
pub fn far_frr(genuine: &[f64], impostor: &[f64], t: f64) -> (f64, f64) {
    let far = impostor.iter().filter(|&&s| s > t).count() as f64 / impostor.len() as f64;
    let frr = genuine.iter().filter(|&&s| s <= t).count() as f64 / genuine.len() as f64;
    (far, frr)
}

fn sorted_unique(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Midpoint threshold minimizing `|FAR − FRR|`; ties go to the lower FAR.
pub fn tune_threshold(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    check_scores(genuine, impostor)?;
    let s = sorted_unique(genuine, impostor);
    let mut candidates = vec![s[0] - 1e-3];
    candidates.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(s[s.len() - 1] + 1e-3);
    let mut best = (f64::INFINITY, f64::INFINITY, candidates[0]);
    for t in candidates {
        let (far, frr) = far_frr(genuine, impostor, t);
        let gap = (far - frr).abs();
        if gap < best.0 || (gap == best.0 && far < best.1) {
            best = (gap, far, t);
        }
    }
    Ok(best.2)
}

/// Equal error rate by linear interpolation between the ROC vertices that
/// bracket the FAR = FRR crossing.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    check_scores(genuine, impostor)?;
    let s = sorted_unique(genuine, impostor);
    let mut prev = far_frr(genuine, impostor, s[0] - 1.0);
    for &t in &s {
        let cur = far_frr(genuine, impostor, t);
        let d = cur.0 - cur.1;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(cur.0);
            }
            let dp = prev.0 - prev.1;
            let a = dp / (dp - d);
            return Ok(prev.0 + a * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR reaches 0 and FRR reaches 1 at the top score")
}

/// Mean cosine between recovered and original embeddings.
pub fn compute_mcs(pairs: &[(SpeakerEmbedding, SpeakerEmbedding)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Parameter("no embedding pairs".into()));
    }
    Ok(pairs.iter().map(|(a, b)| a.cosine(b)).sum::<f64>() / pairs.len() as f64)
}

/// Genuine (own entry) and impostor (every other entry) cosines of labelled
/// embeddings against the registry.
pub fn score_trials(labelled: &[(String, SpeakerEmbedding)], registry: &SpeakerRegistry) -> (Vec<f64>, Vec<f64>) {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (id, v) in labelled {
        for (rid, e) in registry.iter() {
            let s = v.cosine(&e.embedding);
            if rid == id {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    (genuine, impostor)
}

/// Two-column score dump for external ROC tools.
pub fn scores_csv(genuine: &[f64], impostor: &[f64]) -> String {
    let mut s = String::from("label,score\n");
    for g in genuine {
        let _ = writeln!(s, "genuine,{g:.9}");
    }
    for i in impostor {
        let _ = writeln!(s, "impostor,{i:.9}");
    }
    s
}

/// Tracing accuracy: share of trials whose claimed speaker is the true one.
pub fn tracing_accuracy(trials: &[(VerificationDecision, String)]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::Parameter("no trials".into()));
    }
    let ok = trials.iter().filter(|(d, t)| d.claimed.as_deref() == Some(t.as_str())).count();
    Ok(ok as f64 / trials.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub match_rate: f64,
    pub trials: usize,
    /// Match rate expected when claims carry no source information: the
    /// mean over relabellings of the sources, `sum_s P(claim s) P(source s)`.
    pub chance: f64,
    /// `chance + 3 sqrt(chance (1 − chance) / trials)`.
    pub chance_upper: f64,
}

impl LeakageReport {
    pub fn within_chance(&self) -> bool {
        self.match_rate <= self.chance_upper
    }
}

/// Share of converted (unhidden) speeches whose directly extracted embedding
/// verifies as their source speaker, against the rate expected if claims
/// were independent of the source.
pub fn leakage_probe(
    converted: &[(SpeakerEmbedding, String)],
    registry: &SpeakerRegistry,
    threshold: f64,
) -> Result<LeakageReport> {
    if converted.is_empty() {
        return Err(Error::Parameter("leakage probe needs converted speech".into()));
    }
    let mut hits = 0usize;
    let mut claims: BTreeMap<String, usize> = BTreeMap::new();
    let mut sources: BTreeMap<&str, usize> = BTreeMap::new();
    for (v, source) in converted {
        let claimed = verify_speaker(v, registry, threshold)?.claimed;
        if claimed.as_deref() == Some(source.as_str()) {
            hits += 1;
        }
        if let Some(c) = claimed {
            *claims.entry(c).or_default() += 1;
        }
        *sources.entry(source).or_default() += 1;
    }
    let n = converted.len();
    let chance = claims
        .iter()
        .map(|(id, &c)| (c * sources.get(id.as_str()).copied().unwrap_or(0)) as f64)
        .sum::<f64>()
        / (n * n) as f64;
    Ok(LeakageReport {
        match_rate: hits as f64 / n as f64,
        trials: n,
        chance,
        chance_upper: chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt(),
    })
}

/// Mean wall-clock seconds of `op` over `reps` timed runs after two
/// untimed warm-ups.
pub fn measure_mtc<T>(reps: usize, mut op: impl FnMut() -> Result<T>) -> Result<f64> {
    if reps < 10 {
        return Err(Error::Parameter(format!("timing needs at least 10 repetitions, got {reps}")));
    }
    for _ in 0..2 {
        std::hint::black_box(op()?);
    }
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(op()?);
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// One evaluation condition's results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub condition: String,
    pub codec: String,
    pub bitrate: String,
    pub n: usize,
    pub ta: f64,
    pub eer: f64,
    pub mcs: f64,
    pub mtc: f64,
}

pub const METRIC_HEADER: &str = "condition,codec,bitrate,N,TA,EER,MCS,MTC";

pub fn metrics_csv(rows: &[MetricReport]) -> String {
    let mut s = format!("{METRIC_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.condition, r.codec, r.bitrate, r.n, r.ta, r.eer, r.mcs, r.mtc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker::EMBEDDING_DIM;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn basis(i: usize) -> SpeakerEmbedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[i] = 1.0;
        SpeakerEmbedding::from_raw(v).unwrap()
    }

    fn mixed(a: f32, b: f32) -> SpeakerEmbedding {
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = a;
        v[1] = b;
        v[2] = (1.0 - a * a - b * b).max(0.0).sqrt();
        SpeakerEmbedding::from_raw(v).unwrap()
    }

    fn registry(n: usize) -> SpeakerRegistry {
        let mut r = SpeakerRegistry::new();
        for i in 0..n {
            r.register(&format!("s{i}"), &[basis(i)]).unwrap();
        }
        r
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(tune_threshold(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.5);
        let same = [0.2, 0.4, 0.6, 0.8];
        let t = tune_threshold(&same, &same).unwrap();
        assert_eq!(far_frr(&same, &same, t), (0.5, 0.5));
        assert!(tune_threshold(&[], &[0.1]).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(compute_eer(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert!(compute_eer(&[0.5], &[]).is_err());
    }

    #[test]
    fn verification_examples() {
        let reg = registry(3);
        let d = verify_speaker(&basis(1), &reg, 0.5).unwrap();
        assert_eq!(d.claimed.as_deref(), Some("s1"));
        assert!((d.best_score - 1.0).abs() < 1e-12);
        let d = verify_speaker(&basis(7), &reg, 0.5).unwrap();
        assert_eq!(d.claimed, None);
        let d = verify_speaker(&mixed(0.7, 0.0), &registry(1), 0.7).unwrap();
        assert!(d.claimed.is_none() || d.best_score > 0.7);
        // cosines 0.7 and 0.9 to two entries
        let v = mixed(0.7, 0.6);
        let mut reg = SpeakerRegistry::new();
        reg.register("a", &[basis(0)]).unwrap();
        reg.register("b", &[mixed(0.0, 0.9)]).unwrap();
        let sa = v.cosine(&basis(0));
        let sb = v.cosine(&reg.get("b").unwrap().embedding);
        let d = verify_speaker(&v, &reg, 0.0).unwrap();
        assert_eq!(d.claimed.as_deref(), Some(if sb > sa { "b" } else { "a" }));
        assert!(verify_speaker(&v, &SpeakerRegistry::new(), 0.0).is_err());
    }

    #[test]
    fn accept_is_strict() {
        let reg = registry(1);
        assert_eq!(verify_speaker(&basis(0), &reg, 1.0).unwrap().claimed, None);
    }

    fn decision(claim: Option<&str>) -> VerificationDecision {
        VerificationDecision {
            claimed: claim.map(String::from),
            best_id: claim.unwrap_or("x").into(),
            best_score: 0.0,
            threshold: 0.0,
        }
    }

    #[test]
    fn voting_examples() {
        let d = [decision(Some("a")), decision(Some("a")), decision(Some("b"))];
        assert!(chunk_vote(&d, "a").unwrap());
        assert!(!chunk_vote(&d[2..], "a").unwrap());
        assert!(chunk_vote(&d[..1], "a").unwrap());
        assert!(matches!(chunk_vote(&d[..2], "a"), Err(Error::Protocol(_))));
        assert!(matches!(chunk_vote(&[], "a"), Err(Error::Protocol(_))));
    }

    #[test]
    fn mcs_examples() {
        assert_eq!(compute_mcs(&[(basis(0), basis(0))]).unwrap(), 1.0);
        assert_eq!(compute_mcs(&[(basis(0), basis(0)), (basis(0), basis(1))]).unwrap(), 0.5);
        assert!(compute_mcs(&[]).is_err());
    }

    #[test]
    fn vote_accuracy_small_cases() {
        let p: f64 = 0.9987;
        assert!((vote_accuracy(p, 3) - (p.powi(3) + 3.0 * p * p * (1.0 - p))).abs() < 1e-15);
        assert!((vote_accuracy(p, 1) - p).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (est, se) = simulate_vote_accuracy(0.8, 5, 100_000, &mut rng);
        assert!((est - vote_accuracy(0.8, 5)).abs() < 4.0 * se);
    }

    #[test]
    fn mtc_contract() {
        assert!(measure_mtc(9, || Ok(())).is_err());
        let t = measure_mtc(10, || Ok(())).unwrap();
        assert!(t < 1e-3);
    }

    #[test]
    fn leakage_probe_bands() {
        let reg = registry(4);
        let converted: Vec<(SpeakerEmbedding, String)> = (0..4).map(|i| (basis(i), format!("s{i}"))).collect();
        let r = leakage_probe(&converted, &reg, 0.5).unwrap();
        assert_eq!(r.match_rate, 1.0);
        assert_eq!(r.chance, 0.25);
        assert!(!r.within_chance());
        let swapped: Vec<(SpeakerEmbedding, String)> =
            (0..4).map(|i| (basis(i), format!("s{}", (i + 1) % 4))).collect();
        let r = leakage_probe(&swapped, &reg, 0.5).unwrap();
        assert_eq!(r.match_rate, 0.0);
        assert!(r.within_chance());
        // nothing accepted: no chance of a match either
        assert_eq!(leakage_probe(&swapped, &reg, 2.0).unwrap().chance, 0.0);
        assert!(leakage_probe(&[], &reg, 0.5).is_err());
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn leakage_chance_is_the_relabelling_mean(
            claims in prop::collection::vec(0usize..4, 6),
            sources in prop::collection::vec(0usize..4, 6),
        ) {
            let reg = registry(4);
            let probes: Vec<(SpeakerEmbedding, String)> =
                claims.iter().zip(&sources).map(|(&c, &s)| (basis(c), format!("s{s}"))).collect();
            let r = leakage_probe(&probes, &reg, 0.5).unwrap();
            // brute force: average match rate over every assignment of the
            // source labels to probes
            let perms = permutations(&(0..6).collect::<Vec<_>>());
            let total: usize = perms
                .iter()
                .map(|p| (0..6).filter(|&k| claims[k] == sources[p[k]]).count())
                .sum();
            let mean = total as f64 / (perms.len() * 6) as f64;
            prop_assert!((r.chance - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn ta_equals_one_minus_error_rate() {
        let trials = vec![
            (decision(Some("a")), "a".to_string()),
            (decision(Some("b")), "a".to_string()),
            (decision(None), "b".to_string()),
            (decision(Some("b")), "b".to_string()),
        ];
        assert_eq!(tracing_accuracy(&trials).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn eer_reflection_symmetry(
            g in proptest::collection::vec(-1.0f64..1.0, 1..30),
            i in proptest::collection::vec(-1.0f64..1.0, 1..30),
        ) {
            let rg: Vec<f64> = i.iter().map(|s| 1.0 - s).collect();
            let ri: Vec<f64> = g.iter().map(|s| 1.0 - s).collect();
            let a = compute_eer(&g, &i).unwrap();
            let b = compute_eer(&rg, &ri).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn verification_is_scale_free(scale in 0.01f32..100.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f32> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f32> = raw.iter().map(|v| v * scale).collect();
            let reg = registry(5);
            let a = verify_speaker(&SpeakerEmbedding::from_raw(raw).unwrap(), &reg, -1.0).unwrap();
            let b = verify_speaker(&SpeakerEmbedding::from_raw(scaled).unwrap(), &reg, -1.0).unwrap();
            prop_assert_eq!(a.best_id, b.best_id);
        }

        #[test]
        fn voting_is_monotone(bits in proptest::collection::vec(any::<bool>(), 1..8usize), flip in 0usize..8) {
            let n = if bits.len() % 2 == 0 { bits.len() - 1 } else { bits.len() };
            let mut d: Vec<VerificationDecision> =
                bits[..n].iter().map(|&b| decision(Some(if b { "t" } else { "o" }))).collect();
            let before = chunk_vote(&d, "t").unwrap();
            let k = flip % n;
            d[k] = decision(Some("t"));
            let after = chunk_vote(&d, "t").unwrap();
            prop_assert!(!before || after);
        }

        #[test]
        fn ta_matches_error_complement(claims in proptest::collection::vec(0usize..4, 1..40), truths in proptest::collection::vec(0usize..3, 40)) {
            let trials: Vec<(VerificationDecision, String)> = claims
                .iter()
                .zip(&truths)
                .map(|(&c, &t)| (decision(if c == 3 { None } else { Some(["a", "b", "c"][c]) }), ["a", "b", "c"][t].to_string()))
                .collect();
            let wrong = trials.iter().filter(|(d, t)| d.claimed.as_deref() != Some(t.as_str())).count();
            prop_assert!((tracing_accuracy(&trials).unwrap() - (1.0 - wrong as f64 / trials.len() as f64)).abs() < 1e-12);
        }
    }
}
