//! The shipped toy world: a deterministic knowledge base and template set
//! small enough to train on a laptop CPU yet rich enough to exercise every
//! query form, placeholder type, and the unseen-element evaluation.
//!
//! The generated text is committed under `data/`; a test asserts the
//! committed files match this generator so they cannot drift apart.
//!
//! Layout of the world:
//! - A "corpus cluster" (people, cities, countries, monuments, their classes
//!   and relations) that the training corpus samples from.
//! - A disjoint "reserve cluster" (creators, works, institutes, halls, their
//!   own classes and relations) that only the out-of-vocabulary set touches,
//!   so its URIs are guaranteed unseen in training.

use crate::dataset::{parse_templates, Template};
use crate::kb::KnowledgeBase;

const GIVEN: [&str; 18] = [
    "Ada", "Bruno", "Clara", "Dario", "Elena", "Farid", "Greta", "Hugo", "Iris", "Jonas",
    "Karin", "Liam", "Mira", "Nils", "Opal", "Pavel", "Rhea", "Sven",
];
const SURNAME: [&str; 10] = [
    "Abara", "Boyd", "Castel", "Drummond", "Eckert", "Falk", "Grieg", "Hartmann", "Ishida",
    "Jansen",
];
const STEM: [&str; 20] = [
    "Ar", "Brim", "Cal", "Dor", "El", "Fen", "Gar", "Hol", "Ist", "Jor", "Kel", "Lum", "Mar",
    "Nor", "Or", "Pel", "Quil", "Ros", "Sal", "Tor",
];
const CITY_SUFFIX: [&str; 3] = ["dale", "ford", "wick"];
const WORK_A: [&str; 5] = ["Silent", "Gilded", "Hollow", "Crimson", "Winter"];
const WORK_B: [&str; 5] = ["River", "Tower", "Garden", "Mirror", "Voyage"];

pub const PEOPLE: usize = 90;
pub const CITIES: usize = 45;
pub const COUNTRIES: usize = 20;
pub const MONUMENTS: usize = 30;
pub const RESERVE_CREATORS: usize = 20;
pub const RESERVE_WORKS: usize = 25;
pub const RESERVE_INSTITUTES: usize = 10;
pub const RESERVE_HALLS: usize = 10;

fn people() -> Vec<String> {
    let mut out = Vec::with_capacity(PEOPLE);
    'outer: for s in SURNAME {
        for g in GIVEN {
            out.push(format!("dbr:{g}_{s}"));
            if out.len() == PEOPLE {
                break 'outer;
            }
        }
    }
    out
}

fn cities() -> Vec<String> {
    let mut out = Vec::with_capacity(CITIES);
    'outer: for suffix in CITY_SUFFIX {
        for stem in STEM {
            out.push(format!("dbr:{stem}{suffix}"));
            if out.len() == CITIES {
                break 'outer;
            }
        }
    }
    out
}

fn countries() -> Vec<String> {
    STEM.iter().take(COUNTRIES).map(|s| format!("dbr:{s}land")).collect()
}

fn monuments() -> Vec<String> {
    let mut out = Vec::with_capacity(MONUMENTS);
    'outer: for kind in ["Monument", "Obelisk"] {
        for stem in STEM {
            out.push(format!("dbr:{stem}_{kind}"));
            if out.len() == MONUMENTS {
                break 'outer;
            }
        }
    }
    out
}

/// Creators deliberately reuse the surname pool with given names the corpus
/// slice never reaches, so every URI differs from every corpus person.
fn reserve_creators() -> Vec<String> {
    let mut out = Vec::with_capacity(RESERVE_CREATORS);
    'outer: for s in ["Quist", "Voss"] {
        for g in GIVEN {
            out.push(format!("dbr:{g}_{s}"));
            if out.len() == RESERVE_CREATORS {
                break 'outer;
            }
        }
    }
    out
}

fn reserve_works() -> Vec<String> {
    let mut out = Vec::with_capacity(RESERVE_WORKS);
    'outer: for a in WORK_A {
        for b in WORK_B {
            out.push(format!("dbr:The_{a}_{b}"));
            if out.len() == RESERVE_WORKS {
                break 'outer;
            }
        }
    }
    out
}

fn reserve_institutes() -> Vec<String> {
    STEM.iter().take(RESERVE_INSTITUTES).map(|s| format!("dbr:{s}_Institute")).collect()
}

fn reserve_halls() -> Vec<String> {
    STEM.iter().skip(RESERVE_INSTITUTES).take(RESERVE_HALLS).map(|s| format!("dbr:{s}_Hall")).collect()
}

/// The complete triple file, one line per triple, grouped by cluster.
pub fn toy_kb_text() -> String {
    let people = people();
    let cities = cities();
    let countries = countries();
    let monuments = monuments();
    let creators = reserve_creators();
    let works = reserve_works();
    let institutes = reserve_institutes();
    let halls = reserve_halls();

    let mut out = String::new();
    out.push_str("# Toy knowledge base. Regenerate with the corpus generator; do not edit.\n");
    out.push_str("# Corpus cluster: people, cities, countries, monuments.\n");
    for (i, p) in people.iter().enumerate() {
        out.push_str(&format!("{p} dbo:birthPlace {}\n", cities[i % cities.len()]));
        out.push_str(&format!("{p} dbo:deathPlace {}\n", cities[(i * 7 + 3) % cities.len()]));
        out.push_str(&format!("{p} dct:type dbo:Person\n"));
        let subject = if i % 2 == 0 { "dbc:Politicians" } else { "dbc:Artists" };
        out.push_str(&format!("{p} dct:subject {subject}\n"));
        if i % 2 == 0 && i + 1 < people.len() {
            out.push_str(&format!("{p} dbo:spouse {}\n", people[i + 1]));
            out.push_str(&format!("{} dbo:spouse {p}\n", people[i + 1]));
        }
        if i % 3 == 0 {
            out.push_str(&format!("{p} dbo:child {}\n", people[(i + 5) % people.len()]));
        }
    }
    for (i, c) in cities.iter().enumerate() {
        out.push_str(&format!("{c} dbo:country {}\n", countries[i % countries.len()]));
        out.push_str(&format!("{c} dct:type dbo:City\n"));
    }
    for (i, k) in countries.iter().enumerate() {
        out.push_str(&format!("{k} dbo:capital {}\n", cities[i % cities.len()]));
        out.push_str(&format!("{k} dct:type dbo:Country\n"));
        out.push_str(&format!("{k} dbp:populationEstimate \"{}\"\n", 1_200_000 + 37_501 * i));
    }
    for (i, m) in monuments.iter().enumerate() {
        out.push_str(&format!("{m} dbo:country {}\n", countries[(i * 3 + 1) % countries.len()]));
        out.push_str(&format!("{m} dct:type dbo:Monument\n"));
        out.push_str(&format!("{m} dct:subject dbc:Landmarks\n"));
    }

    out.push_str("# Reserve cluster: touched only by the out-of-vocabulary set.\n");
    for (i, c) in creators.iter().enumerate() {
        out.push_str(&format!("{c} dbp:category {}\n", if i % 2 == 0 { "dbc:Musicians" } else { "dbc:Scientists" }));
        out.push_str(&format!("{c} dbp:relatives {}\n", creators[(i + 1) % creators.len()]));
    }
    for (i, w) in works.iter().enumerate() {
        out.push_str(&format!("{w} dbo:author {}\n", creators[i % creators.len()]));
        out.push_str(&format!("{w} dbp:architect {}\n", creators[(i + 3) % creators.len()]));
        out.push_str(&format!("{w} dbp:class {}\n", if i % 2 == 0 { "dbo:Artwork" } else { "dbo:Book" }));
    }
    for (i, inst) in institutes.iter().enumerate() {
        out.push_str(&format!("{inst} dbo:leader {}\n", creators[(i * 2 + 1) % creators.len()]));
        out.push_str(&format!("{inst} dbp:class dbo:Museum\n"));
        out.push_str(&format!("{inst} dbp:architect {}\n", creators[(i * 5 + 2) % creators.len()]));
    }
    for (i, h) in halls.iter().enumerate() {
        out.push_str(&format!("{h} dbo:leader {}\n", creators[(i * 3 + 4) % creators.len()]));
        out.push_str(&format!("{h} dbp:category dbc:Venues\n"));
    }
    out
}

/// The template file: every KB element is a placeholder (no URI appears
/// verbatim in any pattern), so an entry's element inventory is exactly its
/// bindings — the property that makes a fully-unseen OOV set possible.
pub fn toy_templates_text() -> String {
    let rows: Vec<(&str, &str, &str)> = vec![
        (
            "what-of",
            "what is the <property_1> of <resource_1> ?",
            "select ?x where { <resource_1> <property_1> ?x }",
        ),
        (
            "who-of",
            "who is the <property_1> of <resource_1> ?",
            "select ?x where { <resource_1> <property_1> ?x }",
        ),
        (
            "reverse",
            "which things have <resource_1> as their <property_1> ?",
            "select ?x where { ?x <property_1> <resource_1> }",
        ),
        (
            "ask-pair",
            "is <resource_2> the <property_1> of <resource_1> ?",
            "ask where { <resource_1> <property_1> <resource_2> }",
        ),
        (
            "ask-has",
            "does <resource_1> have <resource_2> as <property_1> ?",
            "ask where { <resource_1> <property_1> <resource_2> }",
        ),
        (
            "count-reverse",
            "how many things have <resource_1> as <property_1> ?",
            "select count(?x) where { ?x <property_1> <resource_1> }",
        ),
        (
            "count-class",
            "how many things have <property_1> <class_1> ?",
            "select count(?x) where { ?x <property_1> <class_1> }",
        ),
        (
            "list-class",
            "which things have <property_1> <class_1> ?",
            "select ?x where { ?x <property_1> <class_1> }",
        ),
        (
            "conj",
            "what has <property_1> <resource_1> and <property_2> <resource_2> ?",
            "select ?x where { ?x <property_1> <resource_1> . ?x <property_2> <resource_2> }",
        ),
        (
            "chain",
            "what is the <property_2> of the thing whose <property_1> is <resource_1> ?",
            "select ?x where { ?y <property_1> <resource_1> . ?y <property_2> ?x }",
        ),
        (
            "ask-class",
            "is there a thing with <property_1> <class_1> and <property_2> <resource_1> ?",
            "ask where { ?x <property_1> <class_1> . ?x <property_2> <resource_1> }",
        ),
        (
            "count-class-rel",
            "how many things with <property_1> <class_1> have <property_2> <resource_1> ?",
            "select count(?x) where { ?x <property_1> <class_1> . ?x <property_2> <resource_1> }",
        ),
        (
            "triple-conj",
            "what has <property_1> <class_1> and whose <property_2> is <resource_1> and <property_3> is <resource_2> ?",
            "select ?x where { ?x <property_1> <class_1> . ?x <property_2> <resource_1> . ?x <property_3> <resource_2> }",
        ),
    ];
    let mut out = String::from("# id\tquestion_pattern\tquery_pattern\n");
    for (id, q, s) in rows {
        out.push_str(&format!("{id}\t{q}\t{s}\n"));
    }
    out
}

/// URIs of the reserve cluster, one per line, sorted. Corpus preparation
/// excludes these from sampling so the out-of-vocabulary set has material
/// that is guaranteed unseen.
pub fn toy_holdout_text() -> String {
    let text = toy_kb_text();
    let reserve = &text[text.find("# Reserve cluster").expect("reserve marker")..];
    let kb = KnowledgeBase::load_triples(reserve).expect("reserve cluster parses");
    let mut uris = std::collections::BTreeSet::new();
    for t in kb.triples() {
        uris.insert(t.subject.clone());
        uris.insert(t.property.clone());
        if let crate::kb::Term::Uri(u) = &t.object {
            uris.insert(u.clone());
        }
    }
    let mut out = String::new();
    for u in uris {
        out.push_str(&u);
        out.push('\n');
    }
    out
}

pub fn toy_kb() -> KnowledgeBase {
    KnowledgeBase::load_triples(&toy_kb_text()).expect("generated KB parses")
}

pub fn toy_templates() -> Vec<Template> {
    parse_templates(&toy_templates_text()).expect("generated templates parse")
}
