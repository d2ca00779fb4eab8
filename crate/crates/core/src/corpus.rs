//! Study cases, report preprocessing, vocabulary, dataset splits, and the
//! synthetic multi-view corpus.
//!
//! Both real and synthetic data travel through the same line-delimited JSON
//! manifest: one `{case_id, frontal_ref, lateral_ref, report}` record per
//! line, with an optional `latent_findings` list on synthetic records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::normal;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_MAX_REPORT_LEN: usize = 60;

/// Where a view's pixels (or their synthetic stand-in) live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// Noisy linear projection of a finding-indicator vector.
    Synthetic { findings: Vec<usize>, latent: Vec<f64> },
    /// External image file, resolved by a real backbone backend.
    Path(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCase {
    pub case_id: String,
    pub frontal_ref: ImageRef,
    pub lateral_ref: ImageRef,
    pub report: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_findings: Option<Vec<String>>,
}

/// Lowercase, keep `[a-z0-9 ]`, split on whitespace.
pub fn normalize_report(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter_map(|c| {
            if c.is_whitespace() {
                Some(' ')
            } else if c.is_ascii_lowercase() || c.is_ascii_digit() {
                Some(c)
            } else {
                None
            }
        })
        .collect();
    cleaned.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
    frequencies: BTreeMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Keep tokens whose training-split frequency is strictly greater than
    /// `min_count`. Ids are assigned by descending frequency, ties broken
    /// alphabetically, after the four reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.iter().all(|r| r.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for report in corpus {
            for tok in report {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c > min_count && !RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut frequencies = BTreeMap::new();
        for (t, c) in kept {
            id_to_token.push(t.to_string());
            frequencies.insert(t.to_string(), c);
        }
        Ok(Self::from_parts(id_to_token, frequencies, min_count))
    }

    fn from_parts(id_to_token: Vec<String>, frequencies: BTreeMap<String, usize>, min_count: usize) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
            frequencies,
            min_count,
        }
    }

    /// Rebuild the reverse index after deserialisation.
    pub fn reindex(mut self) -> Self {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn frequency(&self, token: &str) -> Option<usize> {
        self.frequencies.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Decode a generated sequence: drop BOS/PAD, stop at EOS.
    pub fn decode_report(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .filter(|&i| i != BOS && i != PAD)
            .take_while(|&i| i != EOS)
            .map(|i| self.token(i).to_string())
            .collect()
    }

    /// `BOS w₁ … wₙ EOS` with at most `max_len` words.
    pub fn frame_report<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len().min(max_len) + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().take(max_len).map(|t| self.id(t.as_ref())));
        ids.push(EOS);
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Unknown {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl DatasetSplit {
    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Shuffle with a seeded stream, then take `⌊r_train·n⌋` training and
/// `⌊r_val·n⌋` validation cases; the rest form the test split.
pub fn split_dataset(case_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if case_ids.len() < 10 {
        return Err(Error::TooFewCases {
            needed: 10,
            got: case_ids.len(),
        });
    }
    let mut seen = HashSet::new();
    for id in case_ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateCase(id.clone()));
        }
    }
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv < 0.0 || rs < 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = case_ids.len();
    // The epsilon keeps e.g. 0.7·100 = 70.00000000000001 from flooring wrongly
    // in the other direction.
    let n_train = (rt * n as f64 + 1e-9).floor() as usize;
    let n_val = (rv * n as f64 + 1e-9).floor() as usize;
    let mut shuffled = case_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
        seed,
    })
}

/// One finding of the synthetic catalogue and the sentence that reports it.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub name: String,
    pub sentence: String,
    /// Token that occurs in this finding's sentence and in no other.
    pub keyword: String,
}

const CATALOGUE: [(&str, &str, &str); 10] = [
    ("cardiomegaly", "the cardiac silhouette is enlarged", "enlarged"),
    ("effusion", "there is a small left pleural effusion", "effusion"),
    ("pneumothorax", "a small apical pneumothorax is present", "pneumothorax"),
    ("edema", "there is mild interstitial pulmonary edema", "edema"),
    ("consolidation", "focal airspace consolidation is seen in the right base", "consolidation"),
    ("atelectasis", "there is bibasilar subsegmental atelectasis", "atelectasis"),
    ("granuloma", "a calcified granuloma is noted in the upper lobe", "granuloma"),
    ("fracture", "an old healed rib fracture is seen", "fracture"),
    ("emphysema", "the lungs are hyperinflated consistent with emphysema", "emphysema"),
    ("scoliosis", "there is mild thoracic scoliosis", "scoliosis"),
];

pub const NORMAL_SENTENCE: &str = "no acute cardiopulmonary abnormality";

/// The first `n` findings; beyond the named catalogue, placeholder findings
/// `finding<k>` are generated.
pub fn finding_catalogue(n: usize) -> Vec<Finding> {
    (0..n)
        .map(|k| match CATALOGUE.get(k) {
            Some(&(name, sentence, keyword)) => Finding {
                name: name.into(),
                sentence: sentence.into(),
                keyword: keyword.into(),
            },
            None => Finding {
                name: format!("finding{k}"),
                sentence: format!("there is evidence of finding{k}"),
                keyword: format!("finding{k}"),
            },
        })
        .collect()
}

/// Deterministic report text for a set of finding indices: one sentence per
/// finding in catalogue order, or the normal sentence when there are none.
pub fn render_report(findings: &[usize], catalogue: &[Finding]) -> String {
    let mut sorted = findings.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return format!("{NORMAL_SENTENCE}.");
    }
    sorted
        .iter()
        .map(|&f| format!("{}.", catalogue[f].sentence))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_cases: usize,
    pub n_findings: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub noise: f64,
    pub prevalence: f64,
}

impl SyntheticSpec {
    pub fn new(n_cases: usize, n_findings: usize, seed: u64) -> Self {
        Self {
            n_cases,
            n_findings,
            seed,
            latent_dim: 16,
            noise: 0.1,
            prevalence: 0.3,
        }
    }

    pub fn generate(&self) -> Result<Vec<StudyCase>> {
        if self.n_cases < 1 || self.n_findings < 2 {
            return Err(Error::InvalidInput(
                "synthetic corpus needs n_cases >= 1 and n_findings >= 2".into(),
            ));
        }
        let catalogue = finding_catalogue(self.n_findings);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (self.n_findings as f64).sqrt();
        let frontal_map = normal(&mut rng, self.latent_dim, self.n_findings, scale);
        let lateral_map = normal(&mut rng, self.latent_dim, self.n_findings, scale);
        let width = self.n_cases.to_string().len().max(4);

        let mut cases = Vec::with_capacity(self.n_cases);
        for i in 0..self.n_cases {
            let findings: Vec<usize> = (0..self.n_findings)
                .filter(|_| rng.random::<f64>() < self.prevalence)
                .collect();
            let mut indicator = ndarray::Array1::<f64>::zeros(self.n_findings);
            for &f in &findings {
                indicator[f] = 1.0;
            }
            let mut project = |map: &ndarray::Array2<f64>| -> Vec<f64> {
                let clean = map.dot(&indicator);
                let noise = normal(&mut rng, 1, self.latent_dim, self.noise);
                clean.iter().zip(noise.iter()).map(|(a, b)| a + b).collect()
            };
            let frontal = project(&frontal_map);
            let lateral = project(&lateral_map);
            cases.push(StudyCase {
                case_id: format!("syn-{i:0width$}"),
                frontal_ref: ImageRef::Synthetic {
                    findings: findings.clone(),
                    latent: frontal,
                },
                lateral_ref: ImageRef::Synthetic {
                    findings: findings.clone(),
                    latent: lateral,
                },
                report: normalize_report(&render_report(&findings, &catalogue)),
                latent_findings: Some(findings.iter().map(|&f| catalogue[f].name.clone()).collect()),
            });
        }
        Ok(cases)
    }
}

pub fn generate_synthetic_corpus(n_cases: usize, n_findings: usize, seed: u64) -> Result<Vec<StudyCase>> {
    SyntheticSpec::new(n_cases, n_findings, seed).generate()
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    case_id: String,
    frontal_ref: ImageRef,
    lateral_ref: ImageRef,
    report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent_findings: Option<Vec<String>>,
}

/// Serialise cases as manifest lines.
pub fn write_manifest<W: Write>(mut out: W, cases: &[StudyCase]) -> Result<()> {
    for c in cases {
        let rec = ManifestRecord {
            case_id: c.case_id.clone(),
            frontal_ref: c.frontal_ref.clone(),
            lateral_ref: c.lateral_ref.clone(),
            report: c.report.join(" "),
            latent_findings: c.latent_findings.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Outcome of reading a manifest: accepted cases plus how many were dropped
/// because their report normalised to nothing.
#[derive(Debug)]
pub struct Ingested {
    pub cases: Vec<StudyCase>,
    pub dropped_empty: usize,
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Ingested> {
    let mut cases = Vec::new();
    let mut dropped_empty = 0;
    let mut seen = HashSet::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: n + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.case_id.clone()) {
            return Err(Error::DuplicateCase(rec.case_id));
        }
        let report = normalize_report(&rec.report);
        if report.is_empty() {
            dropped_empty += 1;
            continue;
        }
        cases.push(StudyCase {
            case_id: rec.case_id,
            frontal_ref: rec.frontal_ref,
            lateral_ref: rec.lateral_ref,
            report,
            latent_findings: rec.latent_findings,
        });
    }
    Ok(Ingested { cases, dropped_empty })
}

pub fn read_manifest_file(path: &Path) -> Result<Ingested> {
    let f = std::fs::File::open(path)?;
    read_manifest(std::io::BufReader::new(f))
}

pub fn write_manifest_file(path: &Path, cases: &[StudyCase]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_manifest(&mut w, cases)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_report("No Acute Disease."), toks(&["no", "acute", "disease"]));
        assert!(normalize_report("").is_empty());
        assert_eq!(normalize_report("X-RAY:  clear"), toks(&["xray", "clear"]));
        assert!(normalize_report("?!. --").is_empty());
        assert_eq!(normalize_report("a\tb\nc"), toks(&["a", "b", "c"]));
    }

    #[test]
    fn vocabulary_threshold_is_strict() {
        let mut corpus = vec![toks(&["opacity"]); 7];
        corpus.extend(vec![toks(&["rare"]); 2]);
        corpus.extend(vec![toks(&["edge"]); 5]);
        let v = Vocabulary::build(&corpus, 5).unwrap();
        assert_ne!(v.id("opacity"), UNK);
        assert_eq!(v.id("rare"), UNK);
        assert_eq!(v.id("edge"), UNK, "exactly min_count is not more than min_count");
        assert_eq!(v.len(), 5);
        assert_eq!(v.frequency("opacity"), Some(7));
        assert_eq!(v.token(PAD), "<pad>");
    }

    #[test]
    fn vocabulary_rejects_empty_corpus() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(Vocabulary::build(&empty, 5), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn framing_truncates_then_appends_eos() {
        let v = Vocabulary::build(&[toks(&["a", "b", "c"])], 0).unwrap();
        let ids = v.frame_report(&toks(&["a", "b", "c"]), 2);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode_report(&ids), toks(&["a", "b"]));
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        let s = split_dataset(&ids, DEFAULT_RATIOS, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert_eq!(s, split_dataset(&ids, DEFAULT_RATIOS, 3).unwrap());

        let ids: Vec<String> = (0..3111).map(|i| format!("c{i}")).collect();
        let s = split_dataset(&ids, DEFAULT_RATIOS, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2177, 311, 623));
    }

    #[test]
    fn split_errors() {
        let ids: Vec<String> = (0..9).map(|i| format!("c{i}")).collect();
        assert!(matches!(
            split_dataset(&ids, DEFAULT_RATIOS, 0),
            Err(Error::TooFewCases { .. })
        ));
        let mut ids: Vec<String> = (0..12).map(|i| format!("c{i}")).collect();
        ids[3] = "c0".into();
        assert!(matches!(split_dataset(&ids, DEFAULT_RATIOS, 0), Err(Error::DuplicateCase(_))));
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let render = |cases: &[StudyCase]| {
            let mut buf = Vec::new();
            write_manifest(&mut buf, cases).unwrap();
            buf
        };
        let a = generate_synthetic_corpus(4, 6, 7).unwrap();
        let b = generate_synthetic_corpus(4, 6, 7).unwrap();
        assert_eq!(render(&a), render(&b));
        let c = generate_synthetic_corpus(4, 6, 8).unwrap();
        assert_ne!(render(&a), render(&c));
    }

    #[test]
    fn synthetic_views_share_findings() {
        for case in generate_synthetic_corpus(50, 6, 1).unwrap() {
            let (ImageRef::Synthetic { findings: f, .. }, ImageRef::Synthetic { findings: l, .. }) =
                (&case.frontal_ref, &case.lateral_ref)
            else {
                panic!("synthetic refs expected");
            };
            assert_eq!(f, l);
            assert!(!case.report.is_empty());
        }
    }

    #[test]
    fn template_rule_single_finding() {
        let cat = finding_catalogue(6);
        let report = normalize_report(&render_report(&[0], &cat));
        assert_eq!(report, normalize_report(&cat[0].sentence));
        for f in &cat[1..] {
            assert!(!report.contains(&f.keyword));
        }
        assert!(!report.iter().any(|t| NORMAL_SENTENCE.contains(t.as_str()) && t == "abnormality"));
    }

    #[test]
    fn keywords_are_unique_to_their_sentence() {
        let cat = finding_catalogue(12);
        for (i, f) in cat.iter().enumerate() {
            for (j, other) in cat.iter().enumerate() {
                let has = normalize_report(&other.sentence).contains(&f.keyword);
                assert_eq!(has, i == j, "{} in {}", f.keyword, other.sentence);
            }
            assert!(!normalize_report(NORMAL_SENTENCE).contains(&f.keyword));
        }
    }

    #[test]
    fn manifest_round_trip_and_filtering() {
        let cases = generate_synthetic_corpus(5, 3, 2).unwrap();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &cases).unwrap();
        let back = read_manifest(&buf[..]).unwrap();
        assert_eq!(back.cases, cases);

        let line = r#"{"case_id":"x","frontal_ref":{"path":"a.png"},"lateral_ref":{"path":"b.png"},"report":"!!!"}"#;
        let ing = read_manifest(line.as_bytes()).unwrap();
        assert_eq!(ing.dropped_empty, 1);
        let missing = r#"{"case_id":"x","frontal_ref":{"path":"a.png"},"report":"ok"}"#;
        assert!(matches!(read_manifest(missing.as_bytes()), Err(Error::Manifest { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..6, 1..20)) {
            let words = ["lungs", "clear", "heart", "normal", "no", "effusion"];
            let corpus = vec![words.iter().map(|w| w.to_string()).collect::<Vec<_>>(); 3];
            let v = Vocabulary::build(&corpus, 1).unwrap();
            let seq: Vec<String> = idx.iter().map(|&i| words[i].to_string()).collect();
            prop_assert_eq!(v.decode(&v.encode(&seq)), seq);
        }

        #[test]
        fn unknown_tokens_map_to_unk(tok in "[a-z]{12}") {
            let v = Vocabulary::build(&[vec!["known".to_string(); 3]], 1).unwrap();
            prop_assert_eq!(v.encode(&[tok]), vec![UNK]);
        }

        #[test]
        fn splits_are_disjoint_covers(n in 10usize..300, seed in 0u64..1000) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let s = split_dataset(&ids, DEFAULT_RATIOS, seed).unwrap();
            let mut all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(s.train.len(), (n * 7) / 10);
        }
    }
}
