//! Caption hallucination metrics (CHAIR, AMBER generative) and yes/no
//! classification scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth objects per image plus the synonym lexicon used to find
/// object mentions in captions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    images: BTreeMap<String, BTreeSet<String>>,
    /// Normalized surface form (space-joined lowercase words) → canonical name.
    synonyms: HashMap<String, String>,
    vocabulary: BTreeSet<String>,
    target_list: BTreeSet<String>,
    max_ngram: usize,
}

#[derive(Deserialize)]
struct AnnotationFile {
    images: BTreeMap<String, Vec<String>>,
    synonyms: BTreeMap<String, String>,
    #[serde(default)]
    target_list: Vec<String>,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

fn check_canonical(name: &str) -> Result<()> {
    if name.is_empty() || name != name.to_lowercase() {
        return Err(Error::Input(format!(
            "canonical object names must be lowercase and non-empty, got {name:?}"
        )));
    }
    Ok(())
}

impl AnnotationSet {
    pub fn new<I, O, S>(images: I, synonyms: S, target_list: impl IntoIterator<Item = String>) -> Result<Self>
    where
        I: IntoIterator<Item = (String, O)>,
        O: IntoIterator<Item = String>,
        S: IntoIterator<Item = (String, String)>,
    {
        let mut lexicon = HashMap::new();
        let mut vocabulary = BTreeSet::new();
        let mut max_ngram = 0;
        for (surface, canonical) in synonyms {
            check_canonical(&canonical)?;
            let key = words(&surface);
            if key.is_empty() {
                return Err(Error::Input(format!("empty synonym surface form {surface:?}")));
            }
            max_ngram = max_ngram.max(key.len());
            vocabulary.insert(canonical.clone());
            lexicon.insert(key.join(" "), canonical);
        }
        if lexicon.is_empty() {
            return Err(Error::Input("synonym lexicon must be non-empty".into()));
        }
        let mut map = BTreeMap::new();
        for (id, objects) in images {
            let set: BTreeSet<String> = objects.into_iter().collect();
            for o in &set {
                check_canonical(o)?;
            }
            map.insert(id, set);
        }
        let target_list: BTreeSet<String> = target_list.into_iter().collect();
        for t in &target_list {
            check_canonical(t)?;
        }
        Ok(Self {
            images: map,
            synonyms: lexicon,
            vocabulary,
            target_list,
            max_ngram,
        })
    }

    /// Reads `{"images": {id: [objects]}, "synonyms": {surface: canonical}, "target_list": [...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: AnnotationFile = serde_json::from_str(text)
            .map_err(|e| Error::Input(format!("malformed annotation file: {e}")))?;
        Self::new(f.images, f.synonyms, f.target_list)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn ground_truth(&self, image_id: &str) -> Option<&BTreeSet<String>> {
        self.images.get(image_id)
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn target_list(&self) -> &BTreeSet<String> {
        &self.target_list
    }

    fn truth_for(&self, image_id: &str) -> Result<&BTreeSet<String>> {
        self.images
            .get(image_id)
            .ok_or_else(|| Error::Input(format!("image {image_id:?} has no annotations")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YesNoRecord {
    pub question_id: String,
    pub predicted: Answer,
    pub label: Answer,
}

/// Object mentions in `caption`, in order, as canonical names. Matching is
/// longest n-gram first, left to right, without overlaps.
pub fn extract_objects(caption: &str, annotations: &AnnotationSet) -> Vec<String> {
    let ws = words(caption);
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < ws.len() {
        for n in (1..=annotations.max_ngram.min(ws.len() - i)).rev() {
            let key = ws[i..i + n].join(" ");
            if let Some(canonical) = annotations.synonyms.get(&key) {
                out.push(canonical.clone());
                i += n;
                continue 'outer;
            }
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionDetail {
    pub image_id: String,
    pub mentions: Vec<String>,
    pub hallucinated: Vec<String>,
}

struct Scored<'a> {
    detail: CaptionDetail,
    truth: &'a BTreeSet<String>,
}

fn score_captions<'a>(
    captions: &[CaptionRecord],
    annotations: &'a AnnotationSet,
) -> Result<Vec<Scored<'a>>> {
    captions
        .iter()
        .map(|c| {
            let truth = annotations.truth_for(&c.image_id)?;
            let mentions = extract_objects(&c.caption, annotations);
            let hallucinated = mentions.iter().filter(|m| !truth.contains(*m)).cloned().collect();
            Ok(Scored {
                detail: CaptionDetail {
                    image_id: c.image_id.clone(),
                    mentions,
                    hallucinated,
                },
                truth,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    pub captions: usize,
    pub mentions: usize,
    pub details: Vec<CaptionDetail>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn chair(captions: &[CaptionRecord], annotations: &AnnotationSet) -> Result<ChairScores> {
    let scored = score_captions(captions, annotations)?;
    let mentions: usize = scored.iter().map(|s| s.detail.mentions.len()).sum();
    let hallucinated: usize = scored.iter().map(|s| s.detail.hallucinated.len()).sum();
    let bad_captions = scored.iter().filter(|s| !s.detail.hallucinated.is_empty()).count();
    Ok(ChairScores {
        chair_s: ratio(bad_captions, scored.len()),
        chair_i: ratio(hallucinated, mentions),
        captions: scored.len(),
        mentions,
        details: scored.into_iter().map(|s| s.detail).collect(),
    })
}

/// How the cognition score is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CogDenominator {
    /// Mean over captions of target-list hallucinations / mentions.
    #[default]
    PerCaptionMentions,
    /// Corpus-wide target-list hallucinations / all hallucinated mentions.
    CorpusHallucinated,
}

/// AMBER-style generative scores, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmberScores {
    pub chair: f64,
    pub cover: f64,
    pub hal: f64,
    pub cog: f64,
    pub captions: usize,
    /// Captions whose image has a non-empty ground-truth set.
    pub cover_captions: usize,
}

pub fn amber_generative(
    captions: &[CaptionRecord],
    annotations: &AnnotationSet,
    target_list: &BTreeSet<String>,
) -> Result<AmberScores> {
    amber_generative_with(captions, annotations, target_list, CogDenominator::default())
}

pub fn amber_generative_with(
    captions: &[CaptionRecord],
    annotations: &AnnotationSet,
    target_list: &BTreeSet<String>,
    cog_mode: CogDenominator,
) -> Result<AmberScores> {
    let scored = score_captions(captions, annotations)?;
    let n = scored.len();
    let mut chair_sum = 0.0;
    let mut cover_sum = 0.0;
    let mut cover_n = 0;
    let mut hal_n = 0;
    let mut cog_sum = 0.0;
    let mut cog_hits = 0usize;
    let mut all_hallucinated = 0usize;
    for s in &scored {
        let m = s.detail.mentions.len();
        let h = s.detail.hallucinated.len();
        let cog = s.detail.hallucinated.iter().filter(|o| target_list.contains(*o)).count();
        chair_sum += ratio(h, m);
        cog_sum += ratio(cog, m);
        cog_hits += cog;
        all_hallucinated += h;
        if h > 0 {
            hal_n += 1;
        }
        if !s.truth.is_empty() {
            let distinct: BTreeSet<&String> = s.detail.mentions.iter().collect();
            let covered = distinct.iter().filter(|o| s.truth.contains(**o)).count();
            cover_sum += ratio(covered, s.truth.len());
            cover_n += 1;
        }
    }
    let mean = |sum: f64, k: usize| if k == 0 { 0.0 } else { sum / k as f64 };
    let cog = match cog_mode {
        CogDenominator::PerCaptionMentions => mean(cog_sum, n),
        CogDenominator::CorpusHallucinated => ratio(cog_hits, all_hallucinated),
    };
    Ok(AmberScores {
        chair: 100.0 * mean(chair_sum, n),
        cover: 100.0 * mean(cover_sum, cover_n),
        hal: 100.0 * ratio(hal_n, n),
        cog: 100.0 * cog,
        captions: n,
        cover_captions: cover_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinaryScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

/// Accuracy, precision, recall and F1 with "yes" as the positive class.
pub fn binary_scores(records: &[YesNoRecord]) -> Result<BinaryScores> {
    if records.is_empty() {
        return Err(Error::Input("no yes/no records to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.predicted, r.label) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::No) => tn += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryScores {
        accuracy: ratio(tp + tn, records.len()),
        precision,
        recall,
        f1,
        n: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    fn annotations() -> AnnotationSet {
        AnnotationSet::new(
            [
                (s("img1"), vec![s("dog"), s("grass")]),
                (s("img2"), vec![s("cat")]),
            ],
            [
                (s("dog"), s("dog")),
                (s("puppy"), s("dog")),
                (s("grass"), s("grass")),
                (s("cat"), s("cat")),
                (s("frisbee"), s("frisbee")),
                (s("hot dog"), s("food")),
            ],
            [s("frisbee")],
        )
        .unwrap()
    }

    #[test]
    fn extraction_with_synonyms() {
        let a = annotations();
        assert_eq!(
            extract_objects("a dog and a puppy on grass", &a),
            vec!["dog", "dog", "grass"]
        );
        assert!(extract_objects("nothing relevant here", &a).is_empty());
        assert_eq!(extract_objects("A HOT-DOG stand", &a), vec!["food"]);
        assert!(extract_objects("", &a).is_empty());
    }

    #[test]
    fn chair_hand_count() {
        let a = annotations();
        let caps = [
            CaptionRecord { image_id: s("img1"), caption: s("a dog on grass with a frisbee") },
            CaptionRecord { image_id: s("img2"), caption: s("a cat, a cat") },
        ];
        let c = chair(&caps, &a).unwrap();
        assert_eq!(c.chair_s, 0.5);
        assert_eq!(c.chair_i, 0.2);
        assert_eq!(c.details[0].hallucinated, vec!["frisbee"]);
    }

    #[test]
    fn chair_degenerate_cases() {
        let a = annotations();
        let empty = [CaptionRecord { image_id: s("img1"), caption: s("") }];
        let c = chair(&empty, &a).unwrap();
        assert_eq!((c.chair_s, c.chair_i), (0.0, 0.0));
        let all_bad = [CaptionRecord { image_id: s("img2"), caption: s("dog frisbee") }];
        let c = chair(&all_bad, &a).unwrap();
        assert_eq!((c.chair_s, c.chair_i), (1.0, 1.0));
        let unknown = [CaptionRecord { image_id: s("img9"), caption: s("dog") }];
        assert!(matches!(chair(&unknown, &a), Err(Error::Input(m)) if m.contains("img9")));
    }

    #[test]
    fn amber_clean_and_full_cover() {
        let a = annotations();
        let caps = [CaptionRecord { image_id: s("img1"), caption: s("puppy on the grass") }];
        let r = amber_generative(&caps, &a, a.target_list()).unwrap();
        assert_eq!((r.chair, r.hal, r.cog), (0.0, 0.0, 0.0));
        assert_eq!(r.cover, 100.0);
    }

    #[test]
    fn amber_empty_truth_excluded_from_cover() {
        let a = AnnotationSet::new(
            [(s("x"), Vec::<String>::new()), (s("y"), vec![s("dog")])],
            [(s("dog"), s("dog"))],
            [],
        )
        .unwrap();
        let caps = [
            CaptionRecord { image_id: s("x"), caption: s("a dog") },
            CaptionRecord { image_id: s("y"), caption: s("a dog") },
        ];
        let r = amber_generative(&caps, &a, a.target_list()).unwrap();
        assert_eq!(r.cover, 100.0);
        assert_eq!(r.cover_captions, 1);
        assert_eq!(r.hal, 50.0);
        assert_eq!(r.chair, 50.0);
    }

    #[test]
    fn amber_cog_modes() {
        let a = annotations();
        let caps = [
            CaptionRecord { image_id: s("img2"), caption: s("cat frisbee dog grass") },
        ];
        let per = amber_generative_with(&caps, &a, a.target_list(), CogDenominator::PerCaptionMentions).unwrap();
        let corpus = amber_generative_with(&caps, &a, a.target_list(), CogDenominator::CorpusHallucinated).unwrap();
        assert_eq!(per.cog, 25.0);
        assert!((corpus.cog - 100.0 / 3.0).abs() < 1e-12);
    }

    fn yn(p: Answer, l: Answer) -> YesNoRecord {
        YesNoRecord { question_id: s("q"), predicted: p, label: l }
    }

    #[test]
    fn binary_examples() {
        use Answer::*;
        let all_right = [yn(Yes, Yes), yn(No, No)];
        let r = binary_scores(&all_right).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));

        let half = [yn(Yes, Yes), yn(Yes, Yes), yn(Yes, No), yn(Yes, No)];
        let r = binary_scores(&half).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall), (0.5, 0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);

        let wrong = [yn(Yes, No), yn(No, Yes)];
        let r = binary_scores(&wrong).unwrap();
        assert_eq!((r.accuracy, r.f1), (0.0, 0.0));

        assert!(binary_scores(&[]).is_err());
    }

    #[test]
    fn rejects_uppercase_canonical() {
        assert!(AnnotationSet::new(
            [(s("i"), vec![s("Dog")])],
            [(s("dog"), s("dog"))],
            []
        )
        .is_err());
        assert!(AnnotationSet::new([(s("i"), vec![s("dog")])], Vec::<(String, String)>::new(), []).is_err());
    }
}
