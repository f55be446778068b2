//! Builtin category universes.

use crate::model::Taxonomy;

const M6DOC_NAMES: &str = include_str!("../data/m6doc_categories.txt");

pub const DOCBANK_LABELS: [&str; 13] = [
    "abstract",
    "author",
    "caption",
    "date",
    "equation",
    "figure",
    "footer",
    "list",
    "paragraph",
    "reference",
    "section",
    "table",
    "title",
];

pub const DOCLAYNET_LABELS: [&str; 11] =
    ["Caption", "Footnote", "Formula", "List-item", "Page-footer", "Page-header", "Picture", "Section-header", "Table", "Text", "Title"];

pub const PUBLAYNET_LABELS: [&str; 5] = ["text", "title", "list", "table", "figure"];

pub const BUILTIN_IDS: [&str; 6] = ["m6doc", "docbank", "doclaynet", "publaynet", "note_v1", "note_v2"];

pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim_end).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// The 74 M6Doc labels; `_background_` is not a category.
pub fn m6doc() -> Taxonomy {
    let names: Vec<&str> = data_lines(M6DOC_NAMES).collect();
    Taxonomy::from_names("m6doc", &names)
}

pub fn docbank() -> Taxonomy {
    Taxonomy::from_names("docbank", &DOCBANK_LABELS)
}

pub fn doclaynet() -> Taxonomy {
    Taxonomy::from_names("doclaynet", &DOCLAYNET_LABELS)
}

pub fn publaynet() -> Taxonomy {
    Taxonomy::from_names("publaynet", &PUBLAYNET_LABELS)
}

/// First-version note labels (27), in the order of the note relabeling table.
pub fn note_v1() -> Taxonomy {
    let names: Vec<&str> = data_lines(crate::remap::NOTE_V1_TO_V2).map(|l| l.split('\t').next().unwrap()).collect();
    Taxonomy::from_names("note_v1", &names)
}

/// Second-version note labels: the surviving targets of the note relabeling.
pub fn note_v2() -> Taxonomy {
    let mut names: Vec<&str> = Vec::new();
    for line in data_lines(crate::remap::NOTE_V1_TO_V2) {
        let target = line.split('\t').nth(1).unwrap();
        if target != "DROP" && !names.contains(&target) {
            names.push(target);
        }
    }
    Taxonomy::from_names("note_v2", &names)
}

pub fn builtin(id: &str) -> Option<Taxonomy> {
    Some(match id {
        "m6doc" => m6doc(),
        "docbank" => docbank(),
        "doclaynet" => doclaynet(),
        "publaynet" => publaynet(),
        "note_v1" => note_v1(),
        "note_v2" => note_v2(),
        _ => return None,
    })
}
