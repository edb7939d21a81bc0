//! Synthetic two-hop questions: a birthplace fact and a capital fact among distractors.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{MultiHopSample, Provenance};
use crate::tokenizer::Tokenizer;
use crate::{seed, Result};

const PEOPLE: [&str; 12] = [
    "Ada Marlow", "Bram Okafor", "Celia Ruiz", "Dmitri Vale", "Esme Thorn", "Farid Lund",
    "Greta Haas", "Hugo Brandt", "Ines Costa", "Jonas Pike", "Kira Sato", "Lorenz Abel",
];
const COUNTRIES: [&str; 8] = ["Avalor", "Brenmark", "Corvania", "Dunsay", "Estrel", "Falmoor", "Garvia", "Hollin"];
const CAPITALS: [&str; 8] = ["Kestrel", "Lowbridge", "Mirefield", "Northwick", "Oakhaven", "Pellmouth", "Quarry", "Redmere"];
const OTHER: [&str; 6] = [
    "The river through {c} freezes every winter.",
    "{p} studied music for many years.",
    "Most farms in {c} grow barley.",
    "{p} once wrote a book about bridges.",
    "Trains from {c} leave twice a day.",
    "{p} keeps a small boat on the lake.",
];

/// A two-hop question: the answer is the capital of the named person's birth country.
pub fn make_multihop(tokenizer: &Tokenizer, seed: u64) -> Result<MultiHopSample> {
    let mut rng = seed::rng(seed);
    let mut people: Vec<&str> = PEOPLE.to_vec();
    people.shuffle(&mut rng);
    let mut countries: Vec<usize> = (0..COUNTRIES.len()).collect();
    countries.shuffle(&mut rng);
    let person = people[0];
    let country = COUNTRIES[countries[0]];
    let capital = CAPITALS[countries[0]];

    let facts = [
        format!("{person} was born in {country}."),
        format!("The capital of {country} is {capital}."),
    ];
    let mut sentences: Vec<(String, Option<usize>)> = facts.iter().cloned().enumerate().map(|(i, s)| (s, Some(i))).collect();
    // Distractors mention other people and countries and never the answer.
    for k in 1..4 {
        let other = countries[k];
        sentences.push((format!("{} was born in {}.", people[k], COUNTRIES[other]), None));
        sentences.push((format!("The capital of {} is {}.", COUNTRIES[other], CAPITALS[other]), None));
    }
    for _ in 0..4 {
        let tpl = OTHER[rng.random_range(0..OTHER.len())];
        let s = tpl
            .replace("{c}", COUNTRIES[countries[rng.random_range(1..countries.len())]])
            .replace("{p}", people[rng.random_range(1..people.len())]);
        sentences.push((s, None));
    }
    sentences.shuffle(&mut rng);

    let mut context = String::new();
    let mut fact_bytes = vec![0..0; facts.len()];
    for (s, fact) in &sentences {
        if !context.is_empty() {
            context.push(' ');
        }
        let start = context.len();
        context.push_str(s);
        if let Some(i) = fact {
            fact_bytes[*i] = start..context.len();
        }
    }
    let offsets = tokenizer.encode_with_offsets(&context)?;
    let fact_tokens = fact_bytes.iter().map(|r| Tokenizer::span_of(&offsets, r.clone())).collect();
    Ok(MultiHopSample {
        id: format!("synthetic-{seed}"),
        context,
        question: format!("What is the capital of the country where {person} was born?"),
        answer: capital.to_string(),
        fact_bytes,
        fact_tokens,
        provenance: Provenance::Synthetic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_fact_sentences() {
        let t = Tokenizer::Bytes;
        let s = make_multihop(&t, 3).unwrap();
        assert_eq!(s.fact_tokens.len(), 2);
        let first = &s.context[s.fact_bytes[0].clone()];
        assert!(first.contains("was born in"));
        let second = &s.context[s.fact_bytes[1].clone()];
        assert!(second.starts_with("The capital of") && second.ends_with(&format!("{}.", s.answer)));
        let toks = t.encode(&s.context).unwrap();
        assert_eq!(t.decode(&toks[s.fact_tokens[1].clone()]), second);
    }

    #[test]
    fn answer_only_in_its_fact() {
        for seed in 0..50 {
            let s = make_multihop(&Tokenizer::Bytes, seed).unwrap();
            assert_eq!(s.context.matches(&s.answer).count(), 1);
        }
    }
}
