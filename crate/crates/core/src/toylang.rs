//! Synthetic distant language pair: two disjoint alphabets, a bijective
//! lexicon, SVO order on the source side and SOV on the target side.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::embeddings::{save_dictionary, BilingualDictionary, DictProvenance};
use crate::error::{Error, Result};
use crate::text::normalize::write_lines;
use crate::text::{Lang, RawCorpus};

const A_CONSONANTS: &[char] = &['p', 't', 'k', 'b', 'd', 'g', 'm', 'n', 'l', 'r', 's', 'v'];
const A_VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const B_CONSONANTS: &[char] = &['п', 'т', 'к', 'б', 'д', 'г', 'м', 'н', 'л', 'р', 'с', 'в', 'ж', 'ш'];
const B_VOWELS: &[char] = &['а', 'е', 'и', 'о', 'у', 'я'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLangSpec {
    pub nouns: usize,
    pub verbs: usize,
    pub modifiers: usize,
    /// Nouns each verb accepts as subject, and as object.
    pub role_pool: usize,
    /// Modifiers each noun accepts.
    pub modifier_pool: usize,
    /// Most modifiers on one noun phrase.
    pub max_modifiers: usize,
    pub modifier_prob: f64,
    pub zipf_s: f64,
    pub mono_sentences: usize,
    pub test_pairs: usize,
    pub valid_pairs: usize,
    pub seed: u64,
}

impl Default for ToyLangSpec {
    fn default() -> Self {
        Self {
            nouns: 60,
            verbs: 24,
            modifiers: 36,
            role_pool: 10,
            modifier_pool: 5,
            max_modifiers: 2,
            modifier_prob: 0.35,
            zipf_s: 1.2,
            mono_sentences: 5000,
            test_pairs: 500,
            valid_pairs: 200,
            seed: 1,
        }
    }
}

impl ToyLangSpec {
    pub fn vocab_size(&self) -> usize {
        self.nouns + self.verbs + self.modifiers
    }

    pub fn validate(&self) -> Result<()> {
        if self.nouns < 2 || self.verbs == 0 {
            return Err(Error::invalid("toy grammar needs at least two nouns and one verb"));
        }
        if self.role_pool == 0 || self.role_pool > self.nouns {
            return Err(Error::invalid("role_pool must be in 1..=nouns"));
        }
        if self.max_modifiers > 0 && (self.modifier_pool == 0 || self.modifier_pool > self.modifiers) {
            return Err(Error::invalid("modifier_pool must be in 1..=modifiers"));
        }
        if !(0.0..1.0).contains(&self.modifier_prob) || self.zipf_s <= 0.0 {
            return Err(Error::invalid("modifier_prob must be in [0,1) and zipf_s positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Noun,
    Verb,
    Modifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    pub a: String,
    pub b: String,
    pub category: Category,
}

/// Bijection between the two surface vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLexicon {
    pub entries: Vec<LexEntry>,
    #[serde(skip)]
    index: [HashMap<String, usize>; 2],
}

impl ToyLexicon {
    pub fn new(entries: Vec<LexEntry>) -> Result<Self> {
        let mut index = [HashMap::new(), HashMap::new()];
        for (i, e) in entries.iter().enumerate() {
            if index[0].insert(e.a.clone(), i).is_some() || index[1].insert(e.b.clone(), i).is_some() {
                return Err(Error::invalid("lexicon is not a bijection"));
            }
            if index[1].contains_key(&e.a) || index[0].contains_key(&e.b) {
                return Err(Error::invalid("lexicon surface forms overlap across languages"));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Looks up a surface word of `lang` (`Src` = A, `Tgt` = B).
    pub fn lookup(&self, word: &str, lang: Lang) -> Option<&LexEntry> {
        self.index[lang.index()].get(word).map(|&i| &self.entries[i])
    }

    pub fn dictionary(&self) -> BilingualDictionary {
        BilingualDictionary::new(
            self.entries.iter().map(|e| (e.a.clone(), e.b.clone())).collect(),
            DictProvenance::Gold,
        )
    }
}

/// Which side an oracle translation starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarMap {
    /// S-V-O to S-O-V.
    AToB,
    /// S-O-V to S-V-O.
    BToA,
}

/// Word-for-word lexicon substitution plus constituent reordering.
pub fn oracle_translate(lexicon: &ToyLexicon, map: GrammarMap, sentence: &str) -> Result<String> {
    let from = match map {
        GrammarMap::AToB => Lang::Src,
        GrammarMap::BToA => Lang::Tgt,
    };
    let mut words = Vec::new();
    for w in sentence.split_whitespace() {
        let e = lexicon
            .lookup(w, from)
            .ok_or_else(|| Error::invalid(format!("out-of-lexicon token `{w}`")))?;
        words.push(e);
    }
    // constituents: noun phrases end at their noun; the verb stands alone
    let mut nps: Vec<Vec<&LexEntry>> = Vec::new();
    let mut current = Vec::new();
    let mut verb = None;
    for e in words {
        match e.category {
            Category::Modifier => current.push(e),
            Category::Noun => {
                current.push(e);
                nps.push(std::mem::take(&mut current));
            }
            Category::Verb => {
                if verb.is_some() || !current.is_empty() {
                    return Err(Error::invalid("sentence does not follow the toy grammar"));
                }
                verb = Some(e);
            }
        }
    }
    let Some(verb) = verb else {
        return Err(Error::invalid("sentence has no verb"));
    };
    if nps.len() != 2 || !current.is_empty() {
        return Err(Error::invalid("sentence does not follow the toy grammar"));
    }
    let surface = |e: &LexEntry| match map {
        GrammarMap::AToB => e.b.clone(),
        GrammarMap::BToA => e.a.clone(),
    };
    let np = |p: &Vec<&LexEntry>| p.iter().map(|e| surface(e)).collect::<Vec<_>>();
    let mut out = np(&nps[0]);
    match map {
        GrammarMap::AToB => {
            out.extend(np(&nps[1]));
            out.push(surface(verb));
        }
        GrammarMap::BToA => {
            out.push(surface(verb));
            out.extend(np(&nps[1]));
        }
    }
    Ok(out.join(" "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub mono_a: RawCorpus,
    pub mono_b: RawCorpus,
    pub lexicon: ToyLexicon,
    /// `(A sentence, B sentence)` parallel pairs.
    pub test: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
}

impl ToyPair {
    pub fn gold_dictionary(&self) -> BilingualDictionary {
        self.lexicon.dictionary()
    }

    /// Writes `mono.src`, `mono.tgt`, `{test,valid}.{src,tgt}`,
    /// `dict.gold.tsv` and `lexicon.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join("mono.src"), &self.mono_a.lines)?;
        write_lines(&dir.join("mono.tgt"), &self.mono_b.lines)?;
        for (name, set) in [("test", &self.test), ("valid", &self.valid)] {
            let a: Vec<String> = set.iter().map(|p| p.0.clone()).collect();
            let b: Vec<String> = set.iter().map(|p| p.1.clone()).collect();
            write_lines(&dir.join(format!("{name}.src")), &a)?;
            write_lines(&dir.join(format!("{name}.tgt")), &b)?;
        }
        save_dictionary(&self.gold_dictionary(), &dir.join("dict.gold.tsv"))?;
        let path = dir.join("lexicon.json");
        let json = serde_json::to_string_pretty(&self.lexicon.entries)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Loads a lexicon written by [`ToyPair::save`].
pub fn load_lexicon(path: &Path) -> Result<ToyLexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ToyLexicon::new(serde_json::from_str(&text)?)
}

fn pseudo_word<R: Rng>(consonants: &[char], vowels: &[char], rng: &mut R) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.random_range(0..consonants.len())]);
        w.push(vowels[rng.random_range(0..vowels.len())]);
    }
    if rng.random_bool(0.3) {
        w.push(consonants[rng.random_range(0..consonants.len())]);
    }
    w
}

fn word_list<R: Rng>(n: usize, consonants: &[char], vowels: &[char], rng: &mut R) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(consonants, vowels, rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(s))).expect("non-empty pool")
}

/// Abstract sentence: lexicon indices of subject phrase, verb, object phrase.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Clause {
    subj: Vec<usize>,
    verb: usize,
    obj: Vec<usize>,
}

struct Grammar {
    verbs: Vec<usize>,
    verb_dist: WeightedIndex<f64>,
    subj_pool: Vec<Vec<usize>>,
    obj_pool: Vec<Vec<usize>>,
    role_dist: WeightedIndex<f64>,
    mod_pool: HashMap<usize, Vec<usize>>,
    mod_dist: Option<WeightedIndex<f64>>,
    max_modifiers: usize,
    modifier_prob: f64,
}

impl Grammar {
    fn noun_phrase<R: Rng>(&self, noun: usize, rng: &mut R) -> Vec<usize> {
        let mut np = Vec::new();
        if let Some(dist) = &self.mod_dist {
            let pool = &self.mod_pool[&noun];
            for _ in 0..self.max_modifiers {
                if !rng.random_bool(self.modifier_prob) {
                    break;
                }
                let m = pool[dist.sample(rng)];
                if !np.contains(&m) {
                    np.push(m);
                }
            }
        }
        np.push(noun);
        np
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Clause {
        let vi = self.verb_dist.sample(rng);
        let subj_noun = self.subj_pool[vi][self.role_dist.sample(rng)];
        let mut obj_noun = self.obj_pool[vi][self.role_dist.sample(rng)];
        while obj_noun == subj_noun {
            obj_noun = self.obj_pool[vi][self.role_dist.sample(rng)];
        }
        Clause {
            subj: self.noun_phrase(subj_noun, rng),
            verb: self.verbs[vi],
            obj: self.noun_phrase(obj_noun, rng),
        }
    }
}

fn render(c: &Clause, lex: &ToyLexicon, lang: Lang) -> String {
    let w = |i: &usize| match lang {
        Lang::Src => lex.entries[*i].a.as_str(),
        Lang::Tgt => lex.entries[*i].b.as_str(),
    };
    let subj = c.subj.iter().map(w);
    let obj = c.obj.iter().map(w);
    let verb = std::iter::once(w(&c.verb));
    let words: Vec<&str> = match lang {
        Lang::Src => subj.chain(verb).chain(obj).collect(),
        Lang::Tgt => subj.chain(obj).chain(verb).collect(),
    };
    words.join(" ")
}

/// Draws the lexicon, grammar and all corpora from `spec.seed`. Every
/// sentence (monolingual, test, validation) is a distinct clause.
pub fn generate_toy_pair(spec: &ToyLangSpec) -> Result<ToyPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.vocab_size();
    let a_words = word_list(v, A_CONSONANTS, A_VOWELS, &mut rng);
    let b_words = word_list(v, B_CONSONANTS, B_VOWELS, &mut rng);
    let mut entries = Vec::with_capacity(v);
    for (i, (a, b)) in a_words.into_iter().zip(b_words).enumerate() {
        let category = if i < spec.nouns {
            Category::Noun
        } else if i < spec.nouns + spec.verbs {
            Category::Verb
        } else {
            Category::Modifier
        };
        entries.push(LexEntry { a, b, category });
    }
    let lexicon = ToyLexicon::new(entries)?;

    let nouns: Vec<usize> = (0..spec.nouns).collect();
    let modifiers: Vec<usize> = (spec.nouns + spec.verbs..v).collect();
    let pool = |items: &[usize], k: usize, rng: &mut ChaCha8Rng| {
        let mut p = items.to_vec();
        p.shuffle(rng);
        p.truncate(k);
        p
    };
    let verbs: Vec<usize> = (spec.nouns..spec.nouns + spec.verbs).collect();
    let subj_pool = verbs.iter().map(|_| pool(&nouns, spec.role_pool, &mut rng)).collect();
    let obj_pool = verbs.iter().map(|_| pool(&nouns, spec.role_pool, &mut rng)).collect();
    let use_mods = spec.max_modifiers > 0 && spec.modifiers > 0;
    let mod_pool = if use_mods {
        nouns.iter().map(|&n| (n, pool(&modifiers, spec.modifier_pool, &mut rng))).collect()
    } else {
        HashMap::new()
    };
    let grammar = Grammar {
        verb_dist: zipf(verbs.len(), spec.zipf_s),
        verbs,
        subj_pool,
        obj_pool,
        role_dist: zipf(spec.role_pool, spec.zipf_s),
        mod_pool,
        mod_dist: use_mods.then(|| zipf(spec.modifier_pool, spec.zipf_s)),
        max_modifiers: spec.max_modifiers,
        modifier_prob: spec.modifier_prob,
    };

    let needed = 2 * spec.mono_sentences + spec.test_pairs + spec.valid_pairs;
    let max_attempts = 50 * needed + 10_000;
    let mut seen: HashSet<Clause> = HashSet::new();
    let mut clauses = Vec::with_capacity(needed);
    let mut attempts = 0;
    while clauses.len() < needed {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "toy grammar yields too few distinct sentences ({} of {needed})",
                clauses.len()
            )));
        }
        let c = grammar.sample(&mut rng);
        if seen.insert(c.clone()) {
            clauses.push(c);
        }
    }
    let (test_c, rest) = clauses.split_at(spec.test_pairs);
    let (valid_c, rest) = rest.split_at(spec.valid_pairs);
    let (mono_a_c, mono_b_c) = rest.split_at(spec.mono_sentences);
    let pairs = |cs: &[Clause]| -> Vec<(String, String)> {
        cs.iter()
            .map(|c| (render(c, &lexicon, Lang::Src), render(c, &lexicon, Lang::Tgt)))
            .collect()
    };
    Ok(ToyPair {
        mono_a: RawCorpus {
            language: Lang::Src,
            lines: mono_a_c.iter().map(|c| render(c, &lexicon, Lang::Src)).collect(),
        },
        mono_b: RawCorpus {
            language: Lang::Tgt,
            lines: mono_b_c.iter().map(|c| render(c, &lexicon, Lang::Tgt)).collect(),
        },
        test: pairs(test_c),
        valid: pairs(valid_c),
        lexicon,
    })
}

/// Surface tokens of one side of a corpus.
pub fn surface_vocabulary(corpus: &RawCorpus) -> BTreeSet<String> {
    corpus
        .lines
        .iter()
        .flat_map(|l| l.split_whitespace().map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyLangSpec {
        ToyLangSpec {
            mono_sentences: 300,
            test_pairs: 40,
            valid_pairs: 20,
            ..ToyLangSpec::default()
        }
    }

    #[test]
    fn test_sentences_are_reordered_images() {
        let pair = generate_toy_pair(&small()).unwrap();
        for (a, b) in &pair.test {
            assert_eq!(&oracle_translate(&pair.lexicon, GrammarMap::AToB, a).unwrap(), b);
            assert_eq!(&oracle_translate(&pair.lexicon, GrammarMap::BToA, b).unwrap(), a);
        }
    }

    #[test]
    fn word_orders_differ() {
        let pair = generate_toy_pair(&small()).unwrap();
        let (a, b) = &pair.test[0];
        let last_a = a.split_whitespace().last().unwrap();
        let last_b = b.split_whitespace().last().unwrap();
        assert_eq!(pair.lexicon.lookup(last_a, Lang::Src).unwrap().category, Category::Noun);
        assert_eq!(pair.lexicon.lookup(last_b, Lang::Tgt).unwrap().category, Category::Verb);
    }

    #[test]
    fn oov_is_an_error() {
        let pair = generate_toy_pair(&small()).unwrap();
        assert!(oracle_translate(&pair.lexicon, GrammarMap::AToB, "zzz").is_err());
    }

    #[test]
    fn too_small_grammar_is_an_error() {
        let spec = ToyLangSpec {
            nouns: 2,
            verbs: 1,
            modifiers: 0,
            role_pool: 2,
            max_modifiers: 0,
            ..small()
        };
        assert!(generate_toy_pair(&spec).is_err());
    }
}
