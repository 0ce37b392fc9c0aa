//! Seeded synthetic knowledge base: one fact per entity, distractor chunks
//! about the same entity, QA splits and a pre-training text that leaves out
//! every held-out fact.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_store, ChunkStore, Document, WordLimits, WEB_MAX_WORDS};
use crate::error::{Error, Result};
use crate::harness::EvalExample;
use crate::lm_finetune::{save_task_file, Category, FTExample};

pub const TASK_NAME: &str = "synth_qa";
pub const SOURCE: &str = "kb";

/// Relations and the value pool each one draws from. Pools are disjoint.
pub const RELATIONS: [(&str, &[&str]); 8] = [
    ("colour", &["red", "blue", "green", "yellow", "purple", "orange", "black", "white", "grey", "pink"]),
    ("metal", &["gold", "copper", "iron", "tin", "zinc", "lead", "nickel", "cobalt", "chrome", "bronze"]),
    ("animal", &["cat", "dog", "horse", "tiger", "eagle", "whale", "fox", "wolf", "bear", "owl"]),
    ("instrument", &["piano", "violin", "flute", "drum", "harp", "cello", "guitar", "trumpet", "oboe", "banjo"]),
    ("sport", &["tennis", "rugby", "chess", "golf", "hockey", "cricket", "rowing", "judo", "fencing", "archery"]),
    ("planet", &["mercury", "venus", "mars", "jupiter", "saturn", "uranus", "neptune", "pluto", "ceres", "eris"]),
    ("city", &["paris", "rome", "cairo", "lima", "oslo", "delhi", "tokyo", "quito", "dakar", "hanoi"]),
    ("fruit", &["apple", "mango", "pear", "plum", "lemon", "cherry", "peach", "melon", "grape", "kiwi"]),
];

/// Question paraphrases; `{r}` is the relation and `{e}` the entity.
pub const PARAPHRASES: [&str; 4] = [
    "what is the {r} of {e} ?",
    "which {r} does {e} have ?",
    "{e} has which {r} ?",
    "name the {r} of {e} .",
];

const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub entities: usize,
    pub dev: usize,
    pub test: usize,
    /// Distractor chunks per fact.
    pub distractors: usize,
    /// Relations in use, taken from the front of [`RELATIONS`].
    pub relations: usize,
    /// Share of training facts written into the pre-training text.
    pub pretrain_fraction: f64,
    /// Values per relation. Beyond the ten listed in [`RELATIONS`] the pool
    /// is padded with generated four-letter words.
    pub values: usize,
    /// Words per entity name. One gives five-letter names; more gives names
    /// made of two-letter syllable words, which keeps the vocabulary small.
    pub name_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 600,
            dev: 100,
            test: 100,
            distractors: 1,
            relations: RELATIONS.len(),
            pretrain_fraction: 0.5,
            values: 10,
            name_words: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entities < 100 {
            return bad(format!("at least 100 entities are required, got {}", self.entities));
        }
        if self.dev + self.test >= self.entities {
            return bad(format!("dev + test ({}) leaves no training entities", self.dev + self.test));
        }
        if self.relations < 2 || self.relations > RELATIONS.len() {
            return bad(format!("relations must be in 2..={}", RELATIONS.len()));
        }
        if self.distractors >= self.relations {
            return bad(format!("{} distractors need more than {} relations", self.distractors, self.relations));
        }
        if self.name_words == 0 || (self.name_words > 1 && 60f64.powi(self.name_words as i32) < 4.0 * self.entities as f64) {
            return bad(format!("{} name words cannot name {} entities", self.name_words, self.entities));
        }
        if self.values < 2 || self.values > 200 {
            return bad(format!("values per relation must be in 2..=200, got {}", self.values));
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return bad("pretrain_fraction must be in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub entity: String,
    pub relation: usize,
    pub value: String,
}

impl Fact {
    pub fn relation_name(&self) -> &'static str {
        RELATIONS[self.relation].0
    }

    pub fn sentence(&self) -> String {
        format!("the {} of {} is {} .", self.relation_name(), self.entity, self.value)
    }
}

/// A statement about a fact's entity under another relation, so it shares
/// the entity name but carries a wrong answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distractor {
    pub fact: usize,
    pub statement: Fact,
}

#[derive(Debug, Clone)]
pub struct SyntheticKb {
    pub config: SynthConfig,
    pub seed: u64,
    pub facts: Vec<Fact>,
    pub splits: Vec<Split>,
    pub questions: Vec<String>,
    /// Value pool of each relation.
    pub values: Vec<Vec<String>>,
    pub distractors: Vec<Distractor>,
    pub store: ChunkStore,
    /// Store id of each fact's chunk.
    pub gold_chunk: Vec<usize>,
    /// Pre-training lines: a share of the training facts and every
    /// distractor statement.
    pub pretrain: Vec<String>,
}

fn entity_names(n: usize, words: usize, reserved: &HashSet<&str>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pick = |rng: &mut ChaCha8Rng, set: &[u8]| set[rng.gen_range(0..set.len())] as char;
    let syllables: Vec<String> = ONSETS
        .iter()
        .flat_map(|&o| VOWELS.iter().map(move |&v| format!("{}{}", o as char, v as char)))
        .filter(|s| !reserved.contains(s.as_str()))
        .collect();
    let mut seen = HashSet::new();
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let name: String = if words == 1 {
            [
                pick(rng, ONSETS),
                pick(rng, VOWELS),
                pick(rng, ONSETS),
                pick(rng, VOWELS),
                pick(rng, ONSETS),
            ]
            .into_iter()
            .collect()
        } else {
            (0..words)
                .map(|_| syllables[rng.gen_range(0..syllables.len())].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        if !reserved.contains(name.as_str()) && seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names
}

fn value_pools(config: &SynthConfig, reserved: &HashSet<&str>, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut pools: Vec<Vec<String>> = RELATIONS
        .iter()
        .map(|(_, v)| v.iter().take(config.values).map(|s| s.to_string()).collect())
        .collect();
    let mut seen: HashSet<String> = HashSet::new();
    let pick = |rng: &mut ChaCha8Rng, set: &[u8]| set[rng.gen_range(0..set.len())] as char;
    for pool in pools.iter_mut().take(config.relations) {
        while pool.len() < config.values {
            let w: String = [pick(rng, ONSETS), pick(rng, VOWELS), pick(rng, ONSETS), pick(rng, VOWELS)]
                .into_iter()
                .collect();
            if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
                pool.push(w);
            }
        }
    }
    pools
}

fn paraphrase(template: &str, fact: &Fact) -> String {
    template.replace("{r}", fact.relation_name()).replace("{e}", &fact.entity)
}

/// Builds the knowledge base and audits it.
pub fn generate_synthetic_kb(config: &SynthConfig, seed: u64) -> Result<SyntheticKb> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reserved: HashSet<&str> = HashSet::new();
    for (r, values) in &RELATIONS {
        reserved.insert(r);
        reserved.extend(values.iter());
    }
    for p in PARAPHRASES {
        reserved.extend(p.split_whitespace());
    }
    let names = entity_names(config.entities, config.name_words, &reserved, &mut rng);
    let pools = value_pools(config, &reserved, &mut rng);

    let value = |r: usize, rng: &mut ChaCha8Rng| pools[r][rng.gen_range(0..pools[r].len())].clone();
    let mut facts = Vec::with_capacity(names.len());
    let mut distractors = Vec::new();
    for (i, entity) in names.iter().enumerate() {
        let relation = rng.gen_range(0..config.relations);
        facts.push(Fact {
            entity: entity.clone(),
            relation,
            value: value(relation, &mut rng),
        });
        let mut others: Vec<usize> = (0..config.relations).filter(|&r| r != relation).collect();
        others.shuffle(&mut rng);
        for &r in &others[..config.distractors] {
            distractors.push(Distractor {
                fact: i,
                statement: Fact {
                    entity: entity.clone(),
                    relation: r,
                    value: value(r, &mut rng),
                },
            });
        }
    }

    let mut splits = vec![Split::Train; facts.len()];
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    for &i in &order[..config.test] {
        splits[i] = Split::Test;
    }
    for &i in &order[config.test..config.test + config.dev] {
        splits[i] = Split::Dev;
    }
    let questions: Vec<String> = facts
        .iter()
        .map(|f| paraphrase(PARAPHRASES[rng.gen_range(0..PARAPHRASES.len())], f))
        .collect();

    // Facts and distractors interleaved in a seeded order.
    let mut texts: Vec<(Option<usize>, String)> = facts.iter().enumerate().map(|(i, f)| (Some(i), f.sentence())).collect();
    texts.extend(distractors.iter().map(|d| (None, d.statement.sentence())));
    texts.shuffle(&mut rng);
    let docs: Vec<Document> = texts.iter().map(|(_, t)| Document::new(SOURCE, t.clone())).collect();
    let (store, report) = build_store(&docs, &WordLimits::uniform(WEB_MAX_WORDS))?;
    if report.duplicates_dropped > 0 || store.len() != texts.len() {
        return Err(Error::Config("synthetic statements are not unique".into()));
    }
    let mut gold_chunk = vec![0; facts.len()];
    for (id, (fact, _)) in texts.iter().enumerate() {
        if let Some(f) = fact {
            gold_chunk[*f] = id;
        }
    }

    let mut pretrain: Vec<String> = facts
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .filter(|_| rng.gen_bool(config.pretrain_fraction))
        .map(|(f, _)| f.sentence())
        .collect();
    pretrain.extend(distractors.iter().map(|d| d.statement.sentence()));
    pretrain.shuffle(&mut rng);

    let kb = SyntheticKb {
        config: config.clone(),
        seed,
        facts,
        splits,
        questions,
        values: pools,
        distractors,
        store,
        gold_chunk,
        pretrain,
    };
    kb.audit()?;
    Ok(kb)
}

impl SyntheticKb {
    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        (0..self.facts.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Instruction-tuning examples of a split.
    pub fn task_examples(&self, split: Split) -> Vec<FTExample> {
        self.split_ids(split)
            .into_iter()
            .map(|i| FTExample {
                task: TASK_NAME.into(),
                category: Category::OpenQa,
                instruction: self.questions[i].clone(),
                output: self.facts[i].value.clone(),
                context: None,
                self_contained: false,
            })
            .collect()
    }

    pub fn eval_examples(&self, split: Split) -> Vec<EvalExample> {
        self.split_ids(split)
            .into_iter()
            .map(|i| EvalExample::question(format!("fact{i}"), self.questions[i].clone(), vec![self.facts[i].value.clone()]))
            .collect()
    }

    /// Multiple-choice variant: the gold value and `n - 1` other values of
    /// the same relation, in seeded order.
    pub fn choice_examples(&self, split: Split, n: usize, seed: u64) -> Result<Vec<EvalExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.split_ids(split)
            .into_iter()
            .map(|i| {
                let f = &self.facts[i];
                let pool = &self.values[f.relation];
                if n < 2 || n > pool.len() {
                    return Err(Error::Config(format!("{n} choices from a pool of {}", pool.len())));
                }
                let mut choices: Vec<String> = pool.iter().filter(|v| **v != f.value).map(|v| v.to_string()).collect();
                choices.shuffle(&mut rng);
                choices.truncate(n - 1);
                choices.push(f.value.clone());
                choices.shuffle(&mut rng);
                let mut e = EvalExample::question(format!("fact{i}"), self.questions[i].clone(), vec![f.value.clone()]);
                e.choices = Some(choices);
                Ok(e)
            })
            .collect()
    }

    pub fn pretrain_text(&self) -> String {
        self.pretrain.join("\n")
    }

    /// Every string the LM and retriever may see, for building a vocabulary.
    pub fn texts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.store.chunks().iter().map(|c| c.text.clone()).collect();
        out.extend(self.questions.iter().cloned());
        for values in &self.values {
            out.push(values.join(" "));
        }
        out.extend(PARAPHRASES.iter().map(|p| p.to_string()));
        out
    }

    /// Checks that every held-out question has exactly one chunk naming both
    /// its entity and relation (the gold one, holding the answer), and that
    /// no held-out fact reaches the pre-training text.
    pub fn audit(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ContractViolation(format!("synthetic kb audit: {m}")));
        for (i, f) in self.facts.iter().enumerate() {
            if self.splits[i] == Split::Train {
                continue;
            }
            let needle = format!(" {} of {} ", f.relation_name(), f.entity);
            let hits: Vec<usize> = self
                .store
                .chunks()
                .iter()
                .filter(|c| format!(" {} ", c.text).contains(&needle))
                .map(|c| c.id)
                .collect();
            if hits != [self.gold_chunk[i]] {
                return fail(format!("fact {i} is stated by chunks {hits:?}"));
            }
            if !self.store.chunks()[hits[0]].text.contains(&format!(" is {} ", f.value)) {
                return fail(format!("gold chunk of fact {i} lacks its value"));
            }
            let sentence = f.sentence();
            if self.pretrain.iter().any(|l| l.contains(&sentence) || l.contains(needle.trim())) {
                return fail(format!("held-out fact {i} appears in the pre-training text"));
            }
        }
        Ok(())
    }

    /// Writes the chunk store, per-split task files, the pre-training text
    /// and a fact listing into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let store = dir.join("chunks.store");
        self.store.save(&store)?;
        written.push(store);
        for split in [Split::Train, Split::Dev, Split::Test] {
            let path = dir.join(format!("{}.tasks", split.name()));
            save_task_file(&self.task_examples(split), &path)?;
            written.push(path);
        }
        let pretrain = dir.join("pretrain.txt");
        fs::write(&pretrain, self.pretrain_text() + "\n")?;
        written.push(pretrain);
        let facts = dir.join("facts.tsv");
        let mut listing = String::from("# id\tsplit\tentity\trelation\tvalue\tgold_chunk\n");
        for (i, f) in self.facts.iter().enumerate() {
            listing.push_str(&format!(
                "{i}\t{}\t{}\t{}\t{}\t{}\n",
                self.splits[i].name(),
                f.entity,
                f.relation_name(),
                f.value,
                self.gold_chunk[i]
            ));
        }
        fs::write(&facts, listing)?;
        written.push(facts);
        Ok(written)
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for s in &self.splits {
            *m.entry(*s).or_default() += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocabulary;
    use crate::retriever::{search, EmbeddingIndex, Retriever};

    fn small() -> SynthConfig {
        SynthConfig {
            entities: 500,
            dev: 50,
            test: 50,
            ..Default::default()
        }
    }

    #[test]
    fn fact_and_distractor_counts() {
        let kb = generate_synthetic_kb(&small(), 1).unwrap();
        assert_eq!(kb.store.len(), 1000);
        assert_eq!(kb.split_sizes()[&Split::Test], 50);
        assert_eq!(kb.task_examples(Split::Train).len(), 400);
        let kb3 = generate_synthetic_kb(&SynthConfig { distractors: 3, ..small() }, 1).unwrap();
        assert_eq!(kb3.store.len(), 2000);
    }

    #[test]
    fn distractors_share_the_entity() {
        let kb = generate_synthetic_kb(&small(), 2).unwrap();
        for d in &kb.distractors {
            let f = &kb.facts[d.fact];
            assert_eq!(d.statement.entity, f.entity);
            assert_ne!(d.statement.relation, f.relation);
        }
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = generate_synthetic_kb(&small(), 3).unwrap().write_files(a.path()).unwrap();
        let fb = generate_synthetic_kb(&small(), 3).unwrap().write_files(b.path()).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?}");
        }
        let c = generate_synthetic_kb(&small(), 4).unwrap();
        assert_ne!(c.pretrain_text(), generate_synthetic_kb(&small(), 3).unwrap().pretrain_text());
    }

    #[test]
    fn held_out_facts_stay_out_of_pretraining() {
        let kb = generate_synthetic_kb(&small(), 5).unwrap();
        let text = kb.pretrain_text();
        for i in kb.split_ids(Split::Test).into_iter().chain(kb.split_ids(Split::Dev)) {
            assert!(!text.contains(&kb.facts[i].sentence()));
        }
        let train_in = kb
            .split_ids(Split::Train)
            .into_iter()
            .filter(|&i| text.contains(&kb.facts[i].sentence()))
            .count();
        assert!(train_in > 150 && train_in < 250, "{train_in}");
    }

    #[test]
    fn fact_sentence_retrieves_its_own_chunk() {
        let kb = generate_synthetic_kb(&small(), 6).unwrap();
        let texts = kb.texts();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), 10_000);
        let r = Retriever::new(vocab, 256, 6).unwrap();
        let index = EmbeddingIndex::build(&r, &kb.store).unwrap();
        for i in kb.split_ids(Split::Test) {
            let top = search(&r, &index, &kb.facts[i].sentence(), 1).unwrap();
            assert_eq!(top[0].chunk_id, kb.gold_chunk[i]);
        }
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        for c in [
            SynthConfig { entities: 99, ..small() },
            SynthConfig { dev: 250, test: 250, ..small() },
            SynthConfig { distractors: 8, ..small() },
            SynthConfig { pretrain_fraction: 1.5, ..small() },
        ] {
            assert!(matches!(generate_synthetic_kb(&c, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn choices_hold_the_gold() {
        let kb = generate_synthetic_kb(&small(), 7).unwrap();
        for e in kb.choice_examples(Split::Test, 4, 1).unwrap() {
            e.validate().unwrap();
            assert_eq!(e.choices.as_ref().unwrap().len(), 4);
        }
    }

    #[test]
    fn syllable_names_and_wide_value_pools() {
        let config = SynthConfig {
            name_words: 3,
            values: 40,
            ..small()
        };
        let kb = generate_synthetic_kb(&config, 9).unwrap();
        assert!(kb.facts.iter().all(|f| f.entity.split_whitespace().count() == 3));
        for pool in &kb.values {
            let unique: HashSet<&String> = pool.iter().collect();
            assert_eq!((pool.len(), unique.len()), (40, 40));
        }
        let all: HashSet<&String> = kb.values.iter().flatten().collect();
        assert_eq!(all.len(), 40 * RELATIONS.len());
        for f in &kb.facts {
            assert!(kb.values[f.relation].contains(&f.value));
        }
        let texts = kb.texts();
        let vocab: HashSet<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
        assert!(vocab.len() < 500, "vocabulary of {} words", vocab.len());
    }

    #[test]
    fn too_few_name_words_are_rejected() {
        let config = SynthConfig {
            entities: 2000,
            name_words: 2,
            ..small()
        };
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }
}
