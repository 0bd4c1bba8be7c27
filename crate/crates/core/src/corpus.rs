//! Dialogues, contexts and overgenerated candidate sets.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::metrics::tokenize;
use crate::seeded_rng;

/// Candidates per context used by the reference overgeneration setup.
pub const DEFAULT_CANDIDATES: usize = 20;
/// Default number of preceding utterances visible to the reranker.
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    /// Marker token prepended to an utterance when it is encoded.
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "<usr>",
            Speaker::System => "<sys>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Utterance>,
}

/// The most recent utterances preceding a target system turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub context_id: String,
    pub utterances: Vec<Utterance>,
    pub window_size: usize,
}

impl Context {
    /// A context whose window is exactly its utterance count.
    pub fn from_utterances(context_id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        let window_size = utterances.len().max(1);
        Self {
            context_id: context_id.into(),
            utterances,
            window_size,
        }
    }

    /// Keeps only the newest `window` utterances.
    pub fn narrowed(&self, window: usize) -> Context {
        let skip = self.utterances.len().saturating_sub(window);
        Context {
            context_id: self.context_id.clone(),
            utterances: self.utterances[skip..].to_vec(),
            window_size: window,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub context: Context,
    pub gold: String,
    pub greedy: String,
    pub candidates: Vec<String>,
}

impl CandidateSet {
    pub fn j(&self) -> usize {
        self.candidates.len()
    }

    /// Candidate list seen by a reranker: the sampled responses, optionally
    /// followed by the greedy response at index `j`.
    pub fn inference_candidates(&self, include_greedy: bool) -> Vec<String> {
        let mut out = self.candidates.clone();
        if include_greedy {
            out.push(self.greedy.clone());
        }
        out
    }

    /// Copy restricted to the first `count` candidates.
    pub fn truncated(&self, count: usize) -> CandidateSet {
        CandidateSet {
            candidates: self.candidates[..count.min(self.candidates.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Wire form of a candidate set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSetRecord {
    pub context_id: String,
    pub context: Vec<Utterance>,
    pub gold: String,
    pub greedy: String,
    pub candidates: Vec<String>,
}

impl From<&CandidateSet> for CandidateSetRecord {
    fn from(cs: &CandidateSet) -> Self {
        Self {
            context_id: cs.context.context_id.clone(),
            context: cs.context.utterances.clone(),
            gold: cs.gold.clone(),
            greedy: cs.greedy.clone(),
            candidates: cs.candidates.clone(),
        }
    }
}

impl TryFrom<CandidateSetRecord> for CandidateSet {
    type Error = String;

    fn try_from(r: CandidateSetRecord) -> Result<Self, String> {
        if r.candidates.is_empty() {
            return Err("candidates must be non-empty".into());
        }
        if r.gold.trim().is_empty() || r.greedy.trim().is_empty() {
            return Err("gold and greedy must be non-empty".into());
        }
        check_utterances(&r.context)?;
        Ok(CandidateSet {
            context: Context::from_utterances(r.context_id, r.context),
            gold: r.gold,
            greedy: r.greedy,
            candidates: r.candidates,
        })
    }
}

fn check_utterances(turns: &[Utterance]) -> Result<(), String> {
    match turns.iter().position(|u| u.text.trim().is_empty()) {
        Some(i) => Err(format!("utterance {i} has empty text")),
        None => Ok(()),
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, d) in read_jsonl::<Dialogue>(path)? {
        check_utterances(&d.turns).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        if !seen.insert(d.id.clone()) {
            return Err(Error::DuplicateId(d.id));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_candidate_sets(path: &Path) -> Result<Vec<CandidateSet>> {
    read_jsonl::<CandidateSetRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            CandidateSet::try_from(rec).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })
        })
        .collect()
}

/// Context for the system turn at `target_turn`: the `window` utterances
/// immediately before it, oldest first.
pub fn build_context(d: &Dialogue, target_turn: usize, window: usize) -> Result<Context> {
    if window == 0 {
        return Err(Error::invalid("context window must be positive"));
    }
    let turn = d.turns.get(target_turn).ok_or_else(|| {
        Error::invalid(format!(
            "turn {target_turn} out of range for dialogue {} ({} turns)",
            d.id,
            d.turns.len()
        ))
    })?;
    if turn.speaker != Speaker::System {
        return Err(Error::invalid(format!(
            "turn {target_turn} of dialogue {} is not a system turn",
            d.id
        )));
    }
    let start = target_turn.saturating_sub(window);
    Ok(Context {
        context_id: format!("{}#{}", d.id, target_turn),
        utterances: d.turns[start..target_turn].to_vec(),
        window_size: window,
    })
}

/// Every (context, gold) pair of a corpus: one per system turn that has at
/// least one preceding utterance.
pub fn response_pairs(dialogues: &[Dialogue], window: usize) -> Result<Vec<(Context, String)>> {
    let mut out = Vec::new();
    for d in dialogues {
        for (i, turn) in d.turns.iter().enumerate() {
            if i > 0 && turn.speaker == Speaker::System {
                out.push((build_context(d, i, window)?, turn.text.clone()));
            }
        }
    }
    Ok(out)
}

/// Sorted set of distinct tokens across all utterances.
pub fn corpus_vocabulary(dialogues: &[Dialogue]) -> Vec<String> {
    let set: BTreeSet<String> = dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .flat_map(|u| tokenize(&u.text).tokens)
        .collect();
    set.into_iter().collect()
}

/// Names of all `[value_<name>]` placeholders in a delexicalised text.
pub fn validate_delex(text: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(open) = rest.find(['[', ']']) {
        if rest.as_bytes()[open] == b']' {
            return Err(Error::Placeholder(format!(
                "unmatched ']' at byte {}",
                offset + open
            )));
        }
        let after = &rest[open + 1..];
        let close = after.find(']').ok_or_else(|| {
            Error::Placeholder(format!("unclosed '[' at byte {}", offset + open))
        })?;
        let inner = &after[..close];
        if !is_placeholder_name(inner) {
            return Err(Error::Placeholder(format!("[{inner}]")));
        }
        names.push(inner.to_string());
        let consumed = open + 1 + close + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    Ok(names)
}

/// `value_` followed by at least one lowercase alphanumeric or underscore.
pub(crate) fn is_placeholder_name(inner: &str) -> bool {
    inner
        .strip_prefix("value_")
        .is_some_and(|n| {
            !n.is_empty()
                && n
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edit {
    Keep,
    Delete,
    Substitute,
    Duplicate,
}

fn perturb<R: Rng>(gold: &str, tokens: &[String], noise: f64, vocab: &[String], rng: &mut R) -> String {
    let mut out: Vec<&str> = Vec::with_capacity(tokens.len() + 4);
    let mut changed = false;
    for tok in tokens {
        let edit = if rng.gen::<f64>() < noise {
            *[Edit::Delete, Edit::Substitute, Edit::Duplicate]
                .choose(rng)
                .expect("non-empty")
        } else {
            Edit::Keep
        };
        match edit {
            Edit::Keep => out.push(tok),
            Edit::Delete => changed = true,
            Edit::Substitute => {
                changed = true;
                out.push(vocab.choose(rng).map_or(tok.as_str(), String::as_str));
            }
            Edit::Duplicate => {
                changed = true;
                out.push(tok);
                out.push(tok);
            }
        }
    }
    if !changed {
        return gold.to_string();
    }
    if out.is_empty() {
        out.push(&tokens[0]);
    }
    out.join(" ")
}

/// Overgenerated candidates for `gold`: each token is kept, or with
/// probability `noise` deleted, substituted by a vocabulary token, or
/// duplicated. The greedy stand-in uses `noise / 2`.
pub fn synth_candidates(
    context: Context,
    gold: &str,
    j: usize,
    noise: f64,
    vocab: &[String],
    seed: u64,
) -> Result<CandidateSet> {
    let tokens = tokenize(gold).tokens;
    if tokens.is_empty() {
        return Err(Error::invalid("gold response has no tokens"));
    }
    if j == 0 {
        return Err(Error::invalid("j must be positive"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid(format!("noise {noise} outside [0, 1]")));
    }
    let mut rng = seeded_rng(seed, 0);
    let candidates = (0..j)
        .map(|_| perturb(gold, &tokens, noise, vocab, &mut rng))
        .collect();
    let greedy = perturb(gold, &tokens, noise / 2.0, vocab, &mut rng);
    Ok(CandidateSet {
        context,
        gold: gold.to_string(),
        greedy,
        candidates,
    })
}

/// Candidate sets for every response pair of a corpus, substituting from the
/// corpus vocabulary. Set `i` uses its own RNG stream so sets are independent
/// of each other's sizes.
pub fn synth_candidate_sets(
    dialogues: &[Dialogue],
    window: usize,
    j: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    let vocab = corpus_vocabulary(dialogues);
    response_pairs(dialogues, window)?
        .into_iter()
        .enumerate()
        .map(|(i, (ctx, gold))| {
            let set_seed = seeded_rng(seed, i as u64 + 1).gen();
            synth_candidates(ctx, &gold, j, noise, &vocab, set_seed)
        })
        .collect()
}

struct DomainTemplates {
    name: &'static str,
    /// (user turn, system reply) pairs in dialogue order.
    exchanges: &'static [(&'static [&'static str], &'static [&'static str])],
}

const DOMAINS: &[DomainTemplates] = &[
    DomainTemplates {
        name: "restaurant",
        exchanges: &[
            (
                &[
                    "i am looking for a [value_food] restaurant in the [value_area] .",
                    "can you find me a [value_pricerange] place to eat serving [value_food] food ?",
                    "i want to dine somewhere [value_pricerange] in the [value_area] of town .",
                ],
                &[
                    "there are [value_choice] [value_food] restaurants in the [value_area] . what price range would you like ?",
                    "i have [value_choice] restaurants serving [value_food] cuisine . do you prefer a particular price range ?",
                ],
            ),
            (
                &[
                    "something [value_pricerange] please .",
                    "any price is fine , just pick one for me .",
                ],
                &[
                    "[value_name] serves [value_food] food in the [value_area] and is [value_pricerange] . shall i reserve a table ?",
                    "i recommend [value_name] , a [value_pricerange] restaurant in the [value_area] . would you like a table there ?",
                ],
            ),
            (
                &[
                    "yes , book a table for [value_people] at [value_time] on [value_day] .",
                    "please reserve it for [value_people] people on [value_day] at [value_time] .",
                ],
                &[
                    "your table at [value_name] is booked for [value_people] . the reference number is [value_reference] .",
                    "booking was successful . the table will be held for 15 minutes and your reference is [value_reference] .",
                ],
            ),
        ],
    },
    DomainTemplates {
        name: "hotel",
        exchanges: &[
            (
                &[
                    "i need a hotel with [value_stars] stars and free parking .",
                    "find me a guesthouse in the [value_area] with free wifi please .",
                    "are there any [value_pricerange] hotels that include parking ?",
                ],
                &[
                    "there are [value_choice] hotels with [value_stars] stars . do you need free wifi or parking ?",
                    "i found [value_choice] guesthouses in the [value_area] . which star rating do you prefer ?",
                ],
            ),
            (
                &[
                    "the star rating does not matter , whichever has wifi .",
                    "i would like [value_stars] stars if possible .",
                ],
                &[
                    "[value_name] is a [value_stars] star hotel in the [value_area] with free wifi and parking . should i book a room ?",
                    "how about [value_name] ? it has [value_stars] stars , internet and parking . would you like to stay there ?",
                ],
            ),
            (
                &[
                    "book it for [value_people] people for [value_stay] nights starting [value_day] .",
                    "yes please , [value_stay] nights from [value_day] for [value_people] guests .",
                ],
                &[
                    "your room at [value_name] is reserved for [value_stay] nights . reference number : [value_reference] .",
                    "i booked your stay for [value_people] guests . the confirmation number is [value_reference] .",
                ],
            ),
        ],
    },
    DomainTemplates {
        name: "train",
        exchanges: &[
            (
                &[
                    "i need a train from [value_departure] to [value_destination] on [value_day] .",
                    "are there trains leaving [value_departure] going to [value_destination] ?",
                    "help me catch a train to [value_destination] on [value_day] please .",
                ],
                &[
                    "there are [value_choice] trains from [value_departure] to [value_destination] . what time do you want to leave ?",
                    "i see [value_choice] departures to [value_destination] on [value_day] . when would you like to travel ?",
                ],
            ),
            (
                &[
                    "i want to arrive by [value_time] .",
                    "leaving after [value_time] would be best .",
                ],
                &[
                    "train [value_id] departs [value_departure] at [value_leave] and arrives in [value_destination] at [value_arrive] . shall i buy tickets ?",
                    "the [value_leave] train , [value_id] , reaches [value_destination] by [value_arrive] . how many tickets do you need ?",
                ],
            ),
            (
                &[
                    "yes , [value_people] tickets please .",
                    "book seats for [value_people] travellers .",
                ],
                &[
                    "i purchased [value_people] tickets on [value_id] . the total fee is [value_price] payable at the station . reference : [value_reference] .",
                    "your seats on train [value_id] are booked . you will pay [value_price] at the station , reference [value_reference] .",
                ],
            ),
        ],
    },
    DomainTemplates {
        name: "taxi",
        exchanges: &[
            (
                &[
                    "i need a taxi to pick me up at [value_departure] .",
                    "can you order a cab from [value_departure] to [value_destination] ?",
                ],
                &[
                    "sure , where will the taxi take you and when do you want to be picked up ?",
                    "i can arrange a cab . what time should the driver collect you ?",
                ],
            ),
            (
                &[
                    "i want to leave at [value_leave] and go to [value_destination] .",
                    "pick me up at [value_leave] please .",
                ],
                &[
                    "a [value_car] will collect you at [value_leave] . the contact number is [value_phone] .",
                    "your taxi is booked : a [value_car] arriving at [value_leave] , driver phone [value_phone] .",
                ],
            ),
        ],
    },
    DomainTemplates {
        name: "attraction",
        exchanges: &[
            (
                &[
                    "what [value_type] attractions are in the [value_area] ?",
                    "i would like to visit a museum or a park in the [value_area] .",
                    "recommend something fun to see in town .",
                ],
                &[
                    "there are [value_choice] [value_type] attractions in the [value_area] . i suggest [value_name] .",
                    "[value_name] is a popular [value_type] in the [value_area] and entrance is [value_price] .",
                ],
            ),
            (
                &[
                    "what is the address and phone number ?",
                    "could i get the postcode and entrance fee ?",
                ],
                &[
                    "[value_name] is located at [value_address] , postcode [value_postcode] . the phone number is [value_phone] .",
                    "the address is [value_address] , [value_postcode] and admission costs [value_price] .",
                ],
            ),
        ],
    },
];

const CLOSINGS: &[(&str, &str)] = &[
    (
        "thank you , that is all i need .",
        "you are welcome . have a great day and goodbye .",
    ),
    (
        "great , thanks for your help .",
        "glad i could help . enjoy your trip !",
    ),
];

/// Templated, delexicalised task-oriented dialogues. Every system reply is
/// drawn from templates keyed by the preceding user intent, so the context
/// carries information about the gold response.
pub fn synth_dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = seeded_rng(seed, 0);
    (0..n)
        .map(|i| {
            let domain = DOMAINS.choose(&mut rng).expect("non-empty");
            let mut turns = Vec::new();
            let n_ex = rng.gen_range(1..=domain.exchanges.len());
            for (user, system) in &domain.exchanges[..n_ex] {
                turns.push(Utterance::new(Speaker::User, *user.choose(&mut rng).unwrap()));
                turns.push(Utterance::new(Speaker::System, *system.choose(&mut rng).unwrap()));
            }
            if n_ex == domain.exchanges.len() || rng.gen_bool(0.3) {
                let (u, s) = CLOSINGS.choose(&mut rng).unwrap();
                turns.push(Utterance::new(Speaker::User, *u));
                turns.push(Utterance::new(Speaker::System, *s));
            }
            Dialogue {
                id: format!("{}-{:05}", domain.name, i),
                turns,
            }
        })
        .collect()
}
