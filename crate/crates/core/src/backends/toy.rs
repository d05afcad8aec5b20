//! Synthetic bigram "VLM" with a known grounded object set.
//!
//! Each scene carries two bigram tables over the vocabulary: a language-prior
//! table that ignores the image and a scene table concentrated on grounded
//! tokens. The evidence stream reads the scene table alone; the instruction
//! stream mixes in the prior with weight `lambda`:
//!
//! ```text
//! p_E(v | prev) = softmax(scene[prev])[v]
//! p_I(v | prev) = (1 - lambda) * softmax(scene[prev])[v] + lambda * softmax(prior[prev])[v]
//! ```
//!
//! Token 0 is `<s>`: the start context before any history and the stop token.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Alignment, Backend, StreamRole, StreamSession};
use crate::distcore::{softmax_with_temperature, LogitVector, TokenId, VocabMap};
use crate::error::{Error, Result};

pub const BOUNDARY_TOKEN: TokenId = 0;
pub const BOUNDARY_NAME: &str = "<s>";

const OBJECT_NAMES: &[&str] = &[
    "dog", "cat", "person", "car", "bicycle", "tree", "grass", "bench", "frisbee", "ball",
    "table", "chair", "cup", "bottle", "umbrella", "horse", "boat", "bird", "kite", "clock",
    "laptop", "phone", "book", "vase", "pizza", "cake", "banana", "apple", "sandwich", "bowl",
    "train", "bus", "truck", "sign", "skateboard", "surfboard", "sheep", "cow", "bed", "sofa",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub scene_id: String,
    pub vocab: VocabMap,
    pub grounded: BTreeSet<TokenId>,
    pub lambda: f64,
    /// `prior[prev]` scores the next token from language alone.
    pub prior: Vec<LogitVector>,
    /// `scene[prev]` scores the next token given the image.
    pub scene: Vec<LogitVector>,
}

impl ToyScene {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Input(format!(
                "scene {}: lambda must lie in [0, 1], got {}",
                self.scene_id, self.lambda
            )));
        }
        for (name, table) in [("prior", &self.prior), ("scene", &self.scene)] {
            if table.len() != v {
                return Err(Error::Input(format!(
                    "scene {}: {name} table has {} rows, vocabulary has {v}",
                    self.scene_id,
                    table.len()
                )));
            }
            if let Some(row) = table.iter().position(|r| r.vocab_size() != v) {
                return Err(Error::Input(format!(
                    "scene {}: {name} row {row} has wrong length",
                    self.scene_id
                )));
            }
        }
        if let Some(t) = self.grounded.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "scene {}: grounded token {t} outside vocabulary",
                self.scene_id
            )));
        }
        Ok(())
    }

    pub fn scene_probs(&self, prev: TokenId) -> Vec<f64> {
        softmax_with_temperature(&self.scene[prev], 1.0)
            .expect("unit temperature")
            .probs()
            .to_vec()
    }

    pub fn prior_probs(&self, prev: TokenId) -> Vec<f64> {
        softmax_with_temperature(&self.prior[prev], 1.0)
            .expect("unit temperature")
            .probs()
            .to_vec()
    }

    fn stream_logits(&self, role: StreamRole, prev: TokenId) -> Result<LogitVector> {
        let lambda = match role {
            StreamRole::Instruction => self.lambda,
            StreamRole::Evidence => 0.0,
        };
        let scene = self.scene_probs(prev);
        let prior = self.prior_probs(prev);
        let mixed = scene
            .iter()
            .zip(&prior)
            .map(|(s, p)| ((1.0 - lambda) * s + lambda * p).ln())
            .collect();
        LogitVector::new(mixed).map_err(|e| {
            Error::Input(format!(
                "scene {}: row {prev} underflows to zero probability ({e})",
                self.scene_id
            ))
        })
    }

    pub fn is_grounded(&self, token: TokenId) -> bool {
        self.grounded.contains(&token)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scene: ToyScene = serde_json::from_str(&text).map_err(|e| {
            Error::Input(format!("{}: malformed toy scene: {e}", path.display()))
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }
}

/// Toy backend over a set of scenes keyed by scene id.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    vocab: VocabMap,
    scenes: BTreeMap<String, Arc<ToyScene>>,
}

impl ToyBackend {
    pub fn new(scenes: impl IntoIterator<Item = ToyScene>) -> Result<Self> {
        let mut vocab: Option<VocabMap> = None;
        let mut map = BTreeMap::new();
        for scene in scenes {
            scene.validate()?;
            match &vocab {
                None => vocab = Some(scene.vocab.clone()),
                Some(v) if *v != scene.vocab => {
                    return Err(Error::Input(format!(
                        "scene {} uses a different vocabulary",
                        scene.scene_id
                    )))
                }
                Some(_) => {}
            }
            if map.contains_key(&scene.scene_id) {
                return Err(Error::Input(format!("duplicate scene id {}", scene.scene_id)));
            }
            map.insert(scene.scene_id.clone(), Arc::new(scene));
        }
        let vocab = vocab.ok_or_else(|| Error::Input("toy backend needs at least one scene".into()))?;
        Ok(Self { vocab, scenes: map })
    }

    /// Loads a single scene file or every `*.json` scene in a directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_scenes(path)?)
    }

    pub fn scene(&self, id: &str) -> Option<&ToyScene> {
        self.scenes.get(id).map(|s| s.as_ref())
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }
}

pub fn load_scenes(path: &Path) -> Result<Vec<ToyScene>> {
    if !path.exists() {
        return Err(Error::Input(format!("no such file or directory: {}", path.display())));
    }
    if path.is_file() {
        return Ok(vec![ToyScene::read(path)?]);
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no scene files in {}", path.display())));
    }
    files.iter().map(|p| ToyScene::read(p)).collect()
}

impl Backend for ToyBackend {
    type Session = ToySession;

    fn vocab(&self) -> &VocabMap {
        &self.vocab
    }

    fn open_session(&self, role: StreamRole, prompt: &str, image_ref: &str) -> Result<ToySession> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        let scene = self
            .scenes
            .get(image_ref)
            .ok_or_else(|| Error::Input(format!("unknown scene id {image_ref:?}")))?;
        Ok(ToySession {
            scene: Arc::clone(scene),
            role,
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ToySession {
    scene: Arc<ToyScene>,
    role: StreamRole,
    history: Vec<TokenId>,
}

impl StreamSession for ToySession {
    fn next_logits(&mut self) -> Result<LogitVector> {
        let prev = self.history.last().copied().unwrap_or(BOUNDARY_TOKEN);
        self.scene.stream_logits(self.role, prev)
    }

    fn append_token(&mut self, token: TokenId) -> Result<Alignment> {
        if token >= self.scene.vocab.len() {
            return Err(Error::Input(format!(
                "token id {token} outside vocabulary of {}",
                self.scene.vocab.len()
            )));
        }
        self.history.push(token);
        Ok(Alignment::Aligned)
    }

    fn history(&self) -> &[TokenId] {
        &self.history
    }
}

/// Parameters for a seeded toy corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub vocab_size: usize,
    pub lambda: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 100,
            vocab_size: 12,
            lambda: 0.5,
        }
    }
}

pub fn toy_vocab(vocab_size: usize) -> VocabMap {
    let tokens = std::iter::once(BOUNDARY_NAME.to_string())
        .chain((1..vocab_size).map(|i| match OBJECT_NAMES.get(i - 1) {
            Some(name) => (*name).to_string(),
            None => format!("obj{i}"),
        }))
        .collect();
    VocabMap::new(tokens).expect("generated names are distinct")
}

/// Generates a corpus in which every scene shares one language-prior table.
///
/// The prior favours a few globally popular objects and a strong associate
/// per previous token, independent of the scene. Scene tables put most mass
/// on 2 to 5 grounded objects, some on one "confuser" object, and very little on
/// everything else. Each scene row is scaled by a random sharpness in
/// [0.05, 0.4], so the evidence stream ranks grounded objects first but is
/// often only weakly confident about it.
pub fn generate_corpus(spec: &ToyCorpusSpec) -> Result<Vec<ToyScene>> {
    if spec.vocab_size < 4 {
        return Err(Error::Config(format!(
            "toy vocabulary needs at least 4 tokens, got {}",
            spec.vocab_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", spec.lambda)));
    }
    let v = spec.vocab_size;
    let vocab = toy_vocab(v);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let normal = |rng: &mut ChaCha8Rng, mean: f64, sd: f64| mean + sd * std_normal.sample(rng);

    let popularity: Vec<f64> = (0..v).map(|_| normal(&mut rng, 0.0, 1.0)).collect();
    let prior: Vec<LogitVector> = (0..v)
        .map(|prev| {
            let associate = rng.gen_range(1..v);
            let row = (0..v)
                .map(|next| {
                    if next == BOUNDARY_TOKEN {
                        return if prev == BOUNDARY_TOKEN { -4.0 } else { -0.5 };
                    }
                    let mut s = popularity[next] + normal(&mut rng, 0.0, 0.7);
                    if next == associate {
                        s += 3.5;
                    }
                    if next == prev {
                        s -= 1.5;
                    }
                    s
                })
                .collect();
            LogitVector::new(row)
        })
        .collect::<Result<_>>()?;

    let objects: Vec<TokenId> = (1..v).collect();
    let max_grounded = 5.min(objects.len() - 1);
    (0..spec.n_scenes)
        .map(|i| {
            let k = rng.gen_range(2..=max_grounded.max(2));
            let mut shuffled = objects.clone();
            shuffled.shuffle(&mut rng);
            let grounded: BTreeSet<TokenId> = shuffled[..k].iter().copied().collect();
            let confuser = shuffled[k];
            let scene = (0..v)
                .map(|prev| {
                    let sharpness = rng.gen_range(0.05..=0.4);
                    let row = (0..v)
                        .map(|next| {
                            let mut s = if next == BOUNDARY_TOKEN {
                                if prev == BOUNDARY_TOKEN {
                                    -4.0
                                } else {
                                    normal(&mut rng, 0.5, 0.5)
                                }
                            } else if grounded.contains(&next) {
                                normal(&mut rng, 1.5, 0.6)
                            } else if next == confuser {
                                normal(&mut rng, -2.5, 0.5)
                            } else {
                                normal(&mut rng, -7.0, 1.0)
                            };
                            if next == prev && next != BOUNDARY_TOKEN {
                                s -= 1.5;
                            }
                            sharpness * s
                        })
                        .collect();
                    LogitVector::new(row)
                })
                .collect::<Result<_>>()?;
            Ok(ToyScene {
                scene_id: format!("scene-{i:03}"),
                vocab: vocab.clone(),
                grounded,
                lambda: spec.lambda,
                prior: prior.clone(),
                scene,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lambda: f64) -> Vec<ToyScene> {
        generate_corpus(&ToyCorpusSpec {
            seed: 11,
            n_scenes: 5,
            vocab_size: 10,
            lambda,
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a: Vec<String> = corpus(0.5).iter().map(ToyScene::to_json).collect();
        let b: Vec<String> = corpus(0.5).iter().map(ToyScene::to_json).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn instruction_stream_is_the_mixture() {
        let scenes = corpus(0.4);
        let backend = ToyBackend::new(scenes.clone()).unwrap();
        let scene = &scenes[2];
        let mut s = backend
            .open_session(StreamRole::Instruction, "describe", &scene.scene_id)
            .unwrap();
        s.append_token(3).unwrap();
        let got = s.next_logits().unwrap();
        // Direct table arithmetic on row 3.
        let sp = scene.scene_probs(3);
        let pp = scene.prior_probs(3);
        for v in 0..scene.vocab.len() {
            let want = 0.6 * sp[v] + 0.4 * pp[v];
            assert!((got.scores()[v].exp() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_stream_ignores_prior() {
        let scenes = corpus(0.7);
        let backend = ToyBackend::new(scenes.clone()).unwrap();
        let mut s = backend
            .open_session(StreamRole::Evidence, "describe", "scene-000")
            .unwrap();
        let got = s.next_logits().unwrap();
        let sp = scenes[0].scene_probs(BOUNDARY_TOKEN);
        for (g, w) in got.scores().iter().zip(sp) {
            assert!((g.exp() - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lambda_streams_are_bit_identical() {
        let backend = ToyBackend::new(corpus(0.0)).unwrap();
        let mut i = backend.open_session(StreamRole::Instruction, "a", "scene-001").unwrap();
        let mut e = backend.open_session(StreamRole::Evidence, "b", "scene-001").unwrap();
        for tok in [4, 2, 7] {
            assert_eq!(i.next_logits().unwrap(), e.next_logits().unwrap());
            i.append_token(tok).unwrap();
            e.append_token(tok).unwrap();
        }
    }

    #[test]
    fn open_session_errors() {
        let backend = ToyBackend::new(corpus(0.5)).unwrap();
        assert!(matches!(
            backend.open_session(StreamRole::Evidence, "", "scene-000"),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            backend.open_session(StreamRole::Evidence, "p", "nope"),
            Err(Error::Input(_))
        ));
        let mut s = backend.open_session(StreamRole::Evidence, "p", "scene-000").unwrap();
        assert!(s.append_token(99).is_err());
    }

    #[test]
    fn sessions_are_isolated() {
        let backend = ToyBackend::new(corpus(0.5)).unwrap();
        let mut a = backend.open_session(StreamRole::Instruction, "p", "scene-000").unwrap();
        let mut b = backend.open_session(StreamRole::Instruction, "p", "scene-000").unwrap();
        a.append_token(1).unwrap();
        b.append_token(2).unwrap();
        assert_eq!(a.history(), &[1]);
        assert_eq!(b.history(), &[2]);
        assert_ne!(a.next_logits().unwrap(), b.next_logits().unwrap());
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = &corpus(0.5)[0];
        let back: ToyScene = serde_json::from_str(&scene.to_json()).unwrap();
        assert_eq!(&back, scene);
        let doc: serde_json::Value = serde_json::from_str(&scene.to_json()).unwrap();
        for field in ["scene_id", "grounded", "lambda", "prior", "scene"] {
            assert!(doc.get(field).is_some(), "{field}");
        }
    }
}
