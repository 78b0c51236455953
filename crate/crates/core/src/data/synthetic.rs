//! Generated flight-booking requests with `from_city` and `to_city` slots.
//! Test utterances use only cities that never appear in training, so the
//! test score measures how well context, not city names, drives tagging.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{SlotSpan, Utterance};
use crate::params::rng_for;

pub const TEMPLATES: [&str; 30] = [
    "i want to fly from {from} to {to}",
    "show me flights from {from} to {to}",
    "book a flight from {from} to {to} tomorrow",
    "are there any flights from {from} to {to} on monday",
    "i need a ticket to {to} from {from}",
    "what is the cheapest fare from {from} to {to}",
    "list nonstop flights from {from} to {to}",
    "flights to {to} leaving from {from} please",
    "i would like to go from {from} to {to}",
    "departing {from} arriving {to}",
    "leaving {from} and going to {to} next week",
    "get me to {to} from {from} tonight",
    "how much is a one way ticket from {from} to {to}",
    "round trip {from} to {to}",
    "is there a morning flight out of {from} into {to}",
    "find me a cheap flight to {to} departing from {from}",
    "from {from} to {to} on friday",
    "what airlines fly from {from} to {to}",
    "i am travelling from {from} to {to} in june",
    "please book {from} to {to} for two adults",
    "my trip goes from {from} to {to}",
    "what time does the last flight from {from} to {to} leave",
    "to {to} from {from} with a stopover",
    "we are flying out of {from} to {to}",
    "any direct flights between {from} and {to}",
    "i need to get from {from} over to {to}",
    "flying {from} to {to} on the weekend",
    "show me evening departures from {from} for {to}",
    "can i fly to {to} out of {from}",
    "reserve a seat from {from} to {to}",
];

pub const TRAIN_CITIES: [&str; 120] = [
    "atlanta",
    "chicago",
    "denver",
    "seattle",
    "miami",
    "houston",
    "phoenix",
    "detroit",
    "memphis",
    "nashville",
    "portland",
    "sacramento",
    "tucson",
    "omaha",
    "tulsa",
    "wichita",
    "toledo",
    "buffalo",
    "rochester",
    "syracuse",
    "albany",
    "hartford",
    "providence",
    "newark",
    "baltimore",
    "richmond",
    "norfolk",
    "raleigh",
    "charlotte",
    "savannah",
    "charleston",
    "orlando",
    "tampa",
    "jacksonville",
    "pensacola",
    "mobile",
    "birmingham",
    "montgomery",
    "jackson",
    "louisville",
    "lexington",
    "cincinnati",
    "cleveland",
    "columbus",
    "dayton",
    "pittsburgh",
    "philadelphia",
    "indianapolis",
    "milwaukee",
    "madison",
    "minneapolis",
    "duluth",
    "fargo",
    "bismarck",
    "billings",
    "boise",
    "spokane",
    "tacoma",
    "eugene",
    "reno",
    "fresno",
    "oakland",
    "anaheim",
    "san diego",
    "los angeles",
    "san jose",
    "las vegas",
    "kansas city",
    "st louis",
    "port arthur",
    "el paso",
    "austin",
    "fort worth",
    "lubbock",
    "amarillo",
    "albuquerque",
    "santa fe",
    "cheyenne",
    "anchorage",
    "honolulu",
    "juneau",
    "london",
    "paris",
    "berlin",
    "madrid",
    "rome",
    "vienna",
    "moscow",
    "mexico city",
    "hong kong",
    "long beach",
    "terre haute",
    "coral gables",
    "high point",
    "cedar rapids",
    "eau claire",
    "twin falls",
    "bowling green",
    "key west",
    "hot springs",
    "lake charles",
    "mount vernon",
    "new haven",
    "south bend",
    "pine bluff",
    "cape coral",
    "college station",
    "west point",
    "great falls",
    "bar harbor",
    "palo alto",
    "rio de janeiro",
    "sao paulo",
    "kuala lumpur",
    "abu dhabi",
    "walla walla",
    "buenos aires",
    "las cruces",
    "costa mesa",
    "grand junction",
];

pub const HELD_OUT_CITIES: [&str; 40] = [
    "dallas",
    "boston",
    "new york",
    "san francisco",
    "new orleans",
    "salt lake city",
    "st paul",
    "des moines",
    "little rock",
    "baton rouge",
    "green bay",
    "palm springs",
    "santa barbara",
    "san antonio",
    "corpus christi",
    "tallahassee",
    "knoxville",
    "chattanooga",
    "lincoln",
    "topeka",
    "sioux falls",
    "grand rapids",
    "ann arbor",
    "burlington",
    "manchester",
    "edinburgh",
    "glasgow",
    "lyon",
    "marseille",
    "frankfurt",
    "cologne",
    "krakow",
    "budapest",
    "bucharest",
    "istanbul",
    "tel aviv",
    "dubai",
    "cape town",
    "lima",
    "bogota",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FlightCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    /// Every city here comes from [`HELD_OUT_CITIES`].
    pub test: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlightCorpusSpec {
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for FlightCorpusSpec {
    fn default() -> Self {
        Self {
            train_size: 600,
            dev_size: 60,
            test_size: 200,
            seed: 0,
        }
    }
}

/// Fills `template` with the two cities and returns the tagged utterance.
pub fn render(template: &str, from: &str, to: &str) -> Utterance {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    for word in template.split_whitespace() {
        let (city, slot) = match word {
            "{from}" => (from, "from_city"),
            "{to}" => (to, "to_city"),
            w => {
                words.push(w);
                continue;
            }
        };
        let start = words.len();
        words.extend(city.split_whitespace());
        spans.push(SlotSpan::new(start, words.len() - 1, slot));
    }
    Utterance::from_tokens(&words, spans, Some("en".into()))
        .expect("templates produce valid utterances")
}

fn sample(cities: &[&str], count: usize, cycle: bool, rng: &mut impl Rng) -> Vec<Utterance> {
    (0..count)
        .map(|i| {
            let template = TEMPLATES[i % TEMPLATES.len()];
            let from = if cycle {
                cities[i % cities.len()]
            } else {
                cities.choose(rng).expect("non-empty")
            };
            let to = loop {
                let c = cities.choose(rng).expect("non-empty");
                if *c != from {
                    break *c;
                }
            };
            render(template, from, to)
        })
        .collect()
}

/// Training cycles through every template and every training city as the
/// origin; dev reuses training cities, test uses only held-out ones.
pub fn flight_corpus(spec: FlightCorpusSpec) -> FlightCorpus {
    let mut rng = rng_for(spec.seed, "synthetic/flights");
    let train = sample(&TRAIN_CITIES, spec.train_size, true, &mut rng);
    let dev = sample(&TRAIN_CITIES, spec.dev_size, false, &mut rng);
    let test = sample(&HELD_OUT_CITIES, spec.test_size, false, &mut rng);
    FlightCorpus { train, dev, test }
}
