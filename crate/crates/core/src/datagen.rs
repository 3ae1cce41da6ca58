//! Synthetic corpora of invocation-style utterances with per-utterance
//! enabled-domain sets.
//!
//! Domains come in *families* that share utterance patterns and slot words
//! (several weather-like domains, several music-like domains, …). Within a
//! family only a minority of utterances carry a domain-unique signature
//! word, so the enabled set is what usually tells siblings apart.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Real-word themes: name, shared patterns, shared slot vocabularies.
type Theme = (&'static str, &'static [&'static str], &'static [(&'static str, &'static [&'static str])]);

const THEMES: &[Theme] = &[
    (
        "weather",
        &["what is the {thing} in {city}", "will it {event} {when}", "{thing} forecast for {city} {when}"],
        &[
            ("thing", &["weather", "temperature", "humidity", "wind", "forecast"]),
            ("city", &["boston", "seattle", "paris", "tokyo", "denver", "austin"]),
            ("event", &["rain", "snow", "storm", "freeze"]),
            ("when", &["today", "tomorrow", "tonight", "this weekend"]),
        ],
    ),
    (
        "music",
        &["play {genre} {kind}", "play some {kind} by {artist}", "shuffle my {genre} {kind}"],
        &[
            ("genre", &["jazz", "rock", "classical", "pop", "country", "blues"]),
            ("kind", &["music", "songs", "playlist", "album", "station"]),
            ("artist", &["adele", "queen", "miles", "bach", "prince"]),
        ],
    ),
    (
        "news",
        &["read me the {topic} news", "what are the {topic} headlines {when}", "give me my {topic} briefing"],
        &[
            ("topic", &["world", "local", "business", "science", "political", "tech"]),
            ("when", &["today", "this morning", "right now"]),
        ],
    ),
    (
        "recipes",
        &["how do i make {dish}", "find a {diet} recipe for {dish}", "what can i cook with {ingredient}"],
        &[
            ("dish", &["lasagna", "pancakes", "curry", "soup", "tacos", "risotto"]),
            ("diet", &["vegan", "quick", "healthy", "cheap"]),
            ("ingredient", &["chicken", "rice", "eggs", "spinach", "tofu"]),
        ],
    ),
    (
        "sports",
        &["what is the {team} score", "when do the {team} play {when}", "{league} standings {when}"],
        &[
            ("team", &["yankees", "lakers", "patriots", "celtics", "giants", "bruins"]),
            ("league", &["football", "baseball", "hockey", "basketball"]),
            ("when", &["today", "tonight", "this week"]),
        ],
    ),
    (
        "timer",
        &["set a {kind} for {amount} {unit}", "start a {amount} {unit} {kind}", "cancel my {kind}"],
        &[
            ("kind", &["timer", "alarm", "countdown", "reminder"]),
            ("amount", &["five", "ten", "twenty", "thirty"]),
            ("unit", &["minutes", "seconds", "hours"]),
        ],
    ),
    (
        "shopping",
        &["add {item} to my {list}", "order more {item}", "what is on my {list}"],
        &[
            ("item", &["milk", "batteries", "paper towels", "coffee", "bread", "detergent"]),
            ("list", &["shopping list", "cart", "grocery list"]),
        ],
    ),
    (
        "trivia",
        &["ask me a {topic} question", "start a {topic} quiz", "give me {topic} trivia"],
        &[("topic", &["history", "science", "movie", "geography", "animal", "music"])],
    ),
    (
        "travel",
        &["find a {thing} to {city}", "how much is a {thing} to {city} {when}", "book a {thing} for {when}"],
        &[
            ("thing", &["flight", "hotel", "train", "rental car"]),
            ("city", &["london", "rome", "chicago", "miami", "madrid"]),
            ("when", &["friday", "next week", "tomorrow", "june"]),
        ],
    ),
    (
        "games",
        &["let's play {game}", "start a game of {game}", "open {game} {mode}"],
        &[
            ("game", &["blackjack", "bingo", "riddles", "twenty questions", "word chain"]),
            ("mode", &["for two players", "on hard mode", "again"]),
        ],
    ),
    (
        "podcasts",
        &["play the latest {show} episode", "resume my {show} podcast", "find podcasts about {topic}"],
        &[
            ("show", &["comedy", "true crime", "history", "interview", "science"]),
            ("topic", &["startups", "cooking", "space", "politics", "sports"]),
        ],
    ),
    (
        "finance",
        &["what is the price of {asset}", "how is {asset} doing {when}", "check my {account} balance"],
        &[
            ("asset", &["bitcoin", "gold", "the dow", "apple stock", "oil"]),
            ("account", &["checking", "savings", "credit card"]),
            ("when", &["today", "this week", "right now"]),
        ],
    ),
    (
        "fitness",
        &["start a {length} {workout}", "log my {workout}", "how many {metric} did i {verb} today"],
        &[
            ("workout", &["run", "yoga session", "workout", "stretch", "bike ride"]),
            ("length", &["short", "ten minute", "long", "easy"]),
            ("metric", &["steps", "calories", "miles"]),
            ("verb", &["walk", "burn", "do"]),
        ],
    ),
    (
        "movies",
        &["what {kind} are playing {when}", "show times for the new {genre} movie", "recommend a {genre} {kind}"],
        &[
            ("kind", &["movies", "films", "shows"]),
            ("genre", &["horror", "action", "romance", "animated", "thriller"]),
            ("when", &["tonight", "near me", "this weekend"]),
        ],
    ),
    (
        "smarthome",
        &["turn {state} the {device} in the {room}", "set the {device} to {level}", "is the {device} {state}"],
        &[
            ("device", &["lights", "fan", "heater", "thermostat", "tv"]),
            ("state", &["on", "off"]),
            ("room", &["kitchen", "bedroom", "living room", "garage"]),
            ("level", &["low", "high", "seventy", "half"]),
        ],
    ),
    (
        "jokes",
        &["tell me a {kind} joke", "make me laugh with a {kind} {thing}", "another {kind} {thing}"],
        &[
            ("kind", &["funny", "dad", "knock knock", "animal", "silly"]),
            ("thing", &["joke", "pun", "story"]),
        ],
    ),
    (
        "meditation",
        &["start a {length} {practice}", "help me {goal}", "play {sound} sounds to {goal}"],
        &[
            ("practice", &["meditation", "breathing exercise", "body scan"]),
            ("length", &["five minute", "short", "guided"]),
            ("goal", &["relax", "sleep", "focus", "calm down"]),
            ("sound", &["rain", "ocean", "forest", "fire"]),
        ],
    ),
    (
        "traffic",
        &["how is traffic to {place}", "how long to drive to {place} {when}", "any accidents on {road}"],
        &[
            ("place", &["work", "the airport", "downtown", "school"]),
            ("road", &["the highway", "main street", "the bridge"]),
            ("when", &["now", "at five", "this morning"]),
        ],
    ),
    (
        "horoscope",
        &["what is my horoscope for {sign}", "read the {sign} horoscope {when}", "{sign} love forecast {when}"],
        &[
            ("sign", &["aries", "leo", "virgo", "gemini", "pisces", "scorpio"]),
            ("when", &["today", "this week", "tomorrow"]),
        ],
    ),
    (
        "translation",
        &["how do you say {phrase} in {language}", "translate {phrase} to {language}", "what does {phrase} mean in {language}"],
        &[
            ("phrase", &["hello", "thank you", "good night", "where is the station"]),
            ("language", &["spanish", "french", "german", "japanese", "italian"]),
        ],
    ),
];

/// Pattern shapes used by invented themes.
const PSEUDO_PATTERNS: &[&str] = &["{act} {obj}", "{act} the {obj} {mod}", "{mod} {obj} please", "can you {act} {obj}"];

/// An utterance pattern; `{name}` tokens are filled from `slots[name]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    pub slots: BTreeMap<String, Vec<String>>,
}

impl Template {
    pub fn render<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<String> {
        let mut out = Vec::new();
        for piece in self.pattern.split_whitespace() {
            match piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                Some(slot) => {
                    let words = self
                        .slots
                        .get(slot)
                        .filter(|w| !w.is_empty())
                        .ok_or_else(|| Error::Invalid(format!("template slot `{slot}` has no words")))?;
                    out.push(words.choose(rng).expect("non-empty").clone());
                }
                None => out.push(piece.to_string()),
            }
        }
        Ok(out.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: usize,
    pub name: String,
    /// Family label shared by confusable domains.
    pub family: String,
    pub templates: Vec<Template>,
    pub popularity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCatalog {
    pub seed: u64,
    pub domains: Vec<Domain>,
}

impl DomainCatalog {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::UnknownDomainName(name.to_string()))
    }

    pub fn name_of(&self, id: usize) -> Result<&str> {
        self.domains
            .get(id)
            .map(|d| d.name.as_str())
            .ok_or(Error::UnknownDomainId { id, n: self.len() })
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn popularity(&self) -> Vec<f64> {
        self.domains.iter().map(|d| d.popularity).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Invalid(format!("catalog needs ≥ 2 domains, has {}", self.domains.len())));
        }
        let mut names = HashSet::new();
        for (i, d) in self.domains.iter().enumerate() {
            if d.id != i {
                return Err(Error::Invalid(format!("domain `{}` has id {} at position {i}", d.name, d.id)));
            }
            if !names.insert(&d.name) {
                return Err(Error::Invalid(format!("duplicate domain name `{}`", d.name)));
            }
            if d.templates.is_empty() {
                return Err(Error::Invalid(format!("domain `{}` has no templates", d.name)));
            }
            if !(d.popularity > 0.0 && d.popularity.is_finite()) {
                return Err(Error::Invalid(format!("domain `{}` popularity must be positive", d.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let catalog: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        catalog.validate()?;
        Ok(catalog)
    }
}

/// Pronounceable invented words, unique across a catalog.
struct WordForge<'a> {
    rng: &'a mut ChaCha8Rng,
    used: HashSet<String>,
}

impl WordForge<'_> {
    fn word(&mut self) -> String {
        const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl", "kr", "pl", "st", "tr", "sn"];
        const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "oo", "ai"];
        const CODAS: &[&str] = &["", "", "n", "r", "x", "k", "l", "sh"];
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(self.rng).expect("non-empty"));
                w.push_str(VOWELS.choose(self.rng).expect("non-empty"));
            }
            w.push_str(CODAS.choose(self.rng).expect("non-empty"));
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn to_slots(slots: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
    slots
        .iter()
        .map(|(k, ws)| (k.to_string(), ws.iter().map(|w| w.to_string()).collect()))
        .collect()
}

/// Deterministic catalog of `n` domains grouped into confusable families of
/// 1–5 members with Zipf popularity weights.
pub fn build_catalog(n: usize, seed: u64) -> Result<DomainCatalog> {
    if n < 2 {
        return Err(Error::Invalid(format!("catalog needs ≥ 2 domains, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<String> = HashSet::new();
    for (_, patterns, slots) in THEMES {
        for p in *patterns {
            used.extend(p.split_whitespace().map(str::to_string));
        }
        for (_, words) in *slots {
            used.extend(words.iter().flat_map(|w| w.split_whitespace()).map(str::to_string));
        }
    }
    let mut word_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11_face);
    let mut forge = WordForge {
        rng: &mut word_rng,
        used,
    };

    let mut domains = Vec::with_capacity(n);
    let mut theme_index = 0;
    while domains.len() < n {
        let size = rng.random_range(1..=5usize).min(n - domains.len());
        let (family, patterns, slots): (String, Vec<String>, BTreeMap<String, Vec<String>>) =
            match THEMES.get(theme_index) {
                Some((name, patterns, slots)) => {
                    (name.to_string(), patterns.iter().map(|p| p.to_string()).collect(), to_slots(slots))
                }
                None => {
                    let family = forge.word();
                    let slots = ["act", "obj", "mod"]
                        .iter()
                        .map(|k| (k.to_string(), (0..5).map(|_| forge.word()).collect()))
                        .collect();
                    (family, PSEUDO_PATTERNS.iter().map(|p| p.to_string()).collect(), slots)
                }
            };
        theme_index += 1;
        for member in 0..size {
            let signature: Vec<String> = (0..2).map(|_| forge.word()).collect();
            let mut templates: Vec<Template> = patterns
                .iter()
                .map(|p| Template {
                    pattern: p.clone(),
                    slots: slots.clone(),
                })
                .collect();
            let mut sig_slots = slots.clone();
            sig_slots.insert("sig".into(), signature.clone());
            templates.push(Template {
                pattern: format!("{{sig}} {}", patterns[member % patterns.len()]),
                slots: sig_slots,
            });
            domains.push(Domain {
                id: domains.len(),
                name: format!("{family}_{}", signature[0]),
                family: family.clone(),
                templates,
                popularity: 0.0,
            });
        }
    }

    // Zipf weights over a random popularity ranking.
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(&mut rng);
    for (d, r) in domains.iter_mut().zip(ranks) {
        d.popularity = 1.0 / (r + 1) as f64;
    }
    let catalog = DomainCatalog { seed, domains };
    catalog.validate()?;
    Ok(catalog)
}

/// A labelled utterance with its enabled-domain ids (sorted, distinct).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
    pub enabled: Vec<usize>,
}

impl Example {
    pub fn includes_label(&self) -> bool {
        self.enabled.contains(&self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub inclusion_ratio: f64,
    pub mean_enabled: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl RegimeSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.inclusion_ratio) {
            return Err(Error::Invalid(format!("inclusion ratio must be in [0, 1], got {}", self.inclusion_ratio)));
        }
        if !(self.mean_enabled > 0.0 && self.mean_enabled.is_finite()) {
            return Err(Error::Invalid(format!("mean enabled size must be positive, got {}", self.mean_enabled)));
        }
        if self.mean_enabled > n as f64 {
            return Err(Error::Invalid(format!(
                "mean enabled size {} is unsatisfiable with {n} domains",
                self.mean_enabled
            )));
        }
        if self.train == 0 {
            return Err(Error::Invalid("train split must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Example]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }
}

/// Number of candidate utterances drawn per generator shard.
const SHARD: usize = 1000;
/// Give up when the template space cannot fill the requested splits.
const MAX_SHARD_FACTOR: usize = 50;

fn shard_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Split routing: a pure function of the seed and the utterance string, so
/// equal strings always land in the same split.
fn route(seed: u64, text: &str, total: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (bucket % total as u64) as usize
}

/// Weighted sampling of `k` distinct ids without replacement
/// (Efraimidis–Spirakis keys `u^(1/w)`), excluding `exclude`.
pub fn weighted_sample<R: Rng + ?Sized>(weights: &[f64], k: usize, exclude: Option<usize>, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Generates disjoint train/dev/test splits for one regime.
pub fn generate_corpus(catalog: &DomainCatalog, regime: &RegimeSpec) -> Result<Corpus> {
    catalog.validate()?;
    let n = catalog.len();
    regime.validate(n)?;
    let sizes = [regime.train, regime.dev, regime.test];
    let total: usize = sizes.iter().sum();
    let popularity = catalog.popularity();

    // Stage 1: (label, utterance) pairs, routed to splits by utterance hash.
    let mut pairs: [Vec<(usize, String)>; 3] = Default::default();
    let max_shards = MAX_SHARD_FACTOR * total.div_ceil(SHARD) + MAX_SHARD_FACTOR;
    let mut shard = 0u64;
    while pairs.iter().zip(sizes).any(|(p, s)| p.len() < s) {
        if shard as usize >= max_shards {
            return Err(Error::Invalid(
                "template space too small to fill disjoint splits of the requested sizes".into(),
            ));
        }
        let mut rng = shard_rng(regime.seed, shard);
        for _ in 0..SHARD {
            let label = weighted_sample(&popularity, 1, None, &mut rng)[0];
            let template = catalog.domains[label].templates.choose(&mut rng).expect("validated");
            let text = template.render(&mut rng)?;
            let bucket = route(regime.seed, &text, total);
            let split = if bucket < sizes[0] {
                0
            } else if bucket < sizes[0] + sizes[1] {
                1
            } else {
                2
            };
            if pairs[split].len() < sizes[split] {
                pairs[split].push((label, text));
            }
        }
        shard += 1;
    }

    // Stage 2: enabled sets with an exact per-split inclusion count.
    let poisson = Poisson::new(regime.mean_enabled).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut out: [Vec<Example>; 3] = Default::default();
    for (split, items) in pairs.into_iter().enumerate() {
        let mut rng = shard_rng(regime.seed, u64::MAX - split as u64);
        let included = (regime.inclusion_ratio * items.len() as f64).round() as usize;
        let mut flags: Vec<bool> = (0..items.len()).map(|i| i < included).collect();
        flags.shuffle(&mut rng);
        for ((label, text), include) in items.into_iter().zip(flags) {
            let k = poisson.sample(&mut rng) as usize;
            let mut enabled = if include {
                let k = k.clamp(1, n);
                let mut e = weighted_sample(&popularity, k - 1, Some(label), &mut rng);
                e.push(label);
                e
            } else {
                weighted_sample(&popularity, k.min(n - 1), Some(label), &mut rng)
            };
            enabled.sort_unstable();
            out[split].push(Example { text, label, enabled });
        }
    }
    let [train, dev, test] = out;
    Ok(Corpus { train, dev, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub inclusion_ratio: f64,
    pub mean_enabled: f64,
    pub distinct_utterances: usize,
}

pub fn split_stats(examples: &[Example]) -> SplitStats {
    let count = examples.len();
    let denom = count.max(1) as f64;
    SplitStats {
        count,
        inclusion_ratio: examples.iter().filter(|e| e.includes_label()).count() as f64 / denom,
        mean_enabled: examples.iter().map(|e| e.enabled.len()).sum::<usize>() as f64 / denom,
        distinct_utterances: examples.iter().map(|e| e.text.as_str()).collect::<HashSet<_>>().len(),
    }
}

/// Measured statistics of a generated corpus, checked against its regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub domains: usize,
    pub catalog_seed: u64,
    pub regime: RegimeSpec,
    pub splits: BTreeMap<String, SplitStats>,
    pub overall: SplitStats,
    pub inclusion_within_1pct: bool,
    pub mean_enabled_within_5pct: bool,
    pub splits_disjoint: bool,
}

impl GenerationReport {
    pub fn measure(catalog: &DomainCatalog, regime: &RegimeSpec, corpus: &Corpus) -> Self {
        let all: Vec<Example> = corpus.splits().iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        let overall = split_stats(&all);
        let sets: Vec<HashSet<&str>> = corpus
            .splits()
            .iter()
            .map(|(_, s)| s.iter().map(|e| e.text.as_str()).collect())
            .collect();
        let splits_disjoint = sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]);
        Self {
            domains: catalog.len(),
            catalog_seed: catalog.seed,
            regime: regime.clone(),
            splits: corpus
                .splits()
                .iter()
                .map(|(name, s)| (name.to_string(), split_stats(s)))
                .collect(),
            inclusion_within_1pct: (overall.inclusion_ratio - regime.inclusion_ratio).abs() <= 0.01,
            mean_enabled_within_5pct: (overall.mean_enabled - regime.mean_enabled).abs() <= 0.05 * regime.mean_enabled,
            overall,
            splits_disjoint,
        }
    }
}

/// One dataset line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    label: String,
    enabled: Vec<String>,
}

pub fn write_dataset(path: &Path, examples: &[Example], catalog: &DomainCatalog) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let record = Record {
            text: ex.text.clone(),
            label: catalog.name_of(ex.label)?.to_string(),
            enabled: ex
                .enabled
                .iter()
                .map(|&id| catalog.name_of(id).map(str::to_string))
                .collect::<Result<_>>()?,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_dataset(path: &Path, catalog: &DomainCatalog) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_dataset(BufReader::new(file), &path.display().to_string(), catalog)
}

pub fn parse_dataset<R: BufRead>(reader: R, origin: &str, catalog: &DomainCatalog) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: origin.into(),
            line: line_no,
            message,
        };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = catalog.id_of(&record.label).map_err(|e| parse_err(e.to_string()))?;
        let mut enabled = Vec::with_capacity(record.enabled.len());
        for name in &record.enabled {
            enabled.push(catalog.id_of(name).map_err(|e| parse_err(e.to_string()))?);
        }
        enabled.sort_unstable();
        if enabled.windows(2).any(|w| w[0] == w[1]) {
            return Err(parse_err("duplicate domain in `enabled`".into()));
        }
        if record.text.split_whitespace().next().is_none() {
            return Err(parse_err("`text` is empty".into()));
        }
        out.push(Example {
            text: record.text,
            label,
            enabled,
        });
    }
    Ok(out)
}

/// Writes `catalog.json`, the three split files and `report.json` into `dir`.
pub fn write_corpus_dir(dir: &Path, catalog: &DomainCatalog, corpus: &Corpus, report: &GenerationReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    catalog.save(&dir.join("catalog.json"))?;
    for (name, examples) in corpus.splits() {
        write_dataset(&dir.join(format!("{name}.jsonl")), examples, catalog)?;
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Invalid(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a directory written by [`write_corpus_dir`].
pub fn read_corpus_dir(dir: &Path) -> Result<(DomainCatalog, Corpus)> {
    let catalog = DomainCatalog::load(&dir.join("catalog.json"))?;
    let read = |name: &str| read_dataset(&dir.join(format!("{name}.jsonl")), &catalog);
    let corpus = Corpus {
        train: read("train")?,
        dev: read("dev")?,
        test: read("test")?,
    };
    Ok((catalog, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regime(p: f64, mu: f64) -> RegimeSpec {
        RegimeSpec {
            inclusion_ratio: p,
            mean_enabled: mu,
            train: 2000,
            dev: 300,
            test: 300,
            seed: 11,
        }
    }

    #[test]
    fn catalog_contract() {
        let c = build_catalog(100, 3).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.domains.iter().all(|d| !d.templates.is_empty() && d.popularity > 0.0));
        assert_eq!(c, build_catalog(100, 3).unwrap());
        assert_ne!(c, build_catalog(100, 4).unwrap());
        assert!(build_catalog(1, 3).is_err());
    }

    #[test]
    fn catalog_has_confusable_families() {
        let c = build_catalog(30, 1).unwrap();
        let shared = c.domains.iter().any(|a| {
            c.domains
                .iter()
                .any(|b| a.id != b.id && a.templates[0].pattern == b.templates[0].pattern && a.templates[0].slots == b.templates[0].slots)
        });
        assert!(shared);
    }

    #[test]
    fn weighted_sample_is_distinct_and_excludes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = [1.0, 0.5, 0.25, 0.2, 0.1];
        for k in 0..=4 {
            let s = weighted_sample(&w, k, Some(2), &mut rng);
            assert_eq!(s.len(), k);
            assert!(!s.contains(&2));
            assert_eq!(s.iter().collect::<HashSet<_>>().len(), k);
        }
    }

    #[test]
    fn full_inclusion_and_disjoint_splits() {
        let c = build_catalog(12, 2).unwrap();
        let corpus = generate_corpus(&c, &regime(1.0, 3.0)).unwrap();
        assert_eq!((corpus.train.len(), corpus.dev.len(), corpus.test.len()), (2000, 300, 300));
        assert!(corpus.train.iter().all(Example::includes_label));
        let r = GenerationReport::measure(&c, &regime(1.0, 3.0), &corpus);
        assert!(r.splits_disjoint);
        for e in corpus.train.iter() {
            assert!(e.enabled.windows(2).all(|w| w[0] < w[1]));
            assert!(e.enabled.len() <= 12);
        }
    }

    #[test]
    fn zero_inclusion_never_contains_label() {
        let c = build_catalog(12, 2).unwrap();
        let corpus = generate_corpus(&c, &regime(0.0, 2.0)).unwrap();
        assert!(corpus.train.iter().all(|e| !e.includes_label()));
    }

    #[test]
    fn unsatisfiable_mean_is_rejected() {
        let c = build_catalog(5, 2).unwrap();
        assert!(generate_corpus(&c, &regime(0.5, 5.5)).is_err());
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let c = build_catalog(8, 5).unwrap();
        let corpus = generate_corpus(&c, &regime(0.7, 2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_dataset(&path, &corpus.train[..1000], &c).unwrap();
        assert_eq!(read_dataset(&path, &c).unwrap(), corpus.train[..1000]);

        let name = &c.domains[0].name;
        let ok = format!("{{\"text\":\"play jazz\",\"label\":\"{name}\",\"enabled\":[]}}\n");
        let parsed = parse_dataset(ok.as_bytes(), "mem", &c).unwrap();
        assert!(parsed[0].enabled.is_empty());

        let missing = format!("{ok}{{\"text\":\"play jazz\",\"enabled\":[]}}\n");
        match parse_dataset(missing.as_bytes(), "mem", &c) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let unknown = "{\"text\":\"a\",\"label\":\"nope\",\"enabled\":[]}\n";
        assert!(matches!(parse_dataset(unknown.as_bytes(), "mem", &c), Err(Error::Parse { line: 1, .. })));
    }
}
