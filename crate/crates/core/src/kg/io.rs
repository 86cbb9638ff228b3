use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CategoryAssignment, EntityId, EntityKind, KgBuilder, KgError, KnowledgeGraph, DEFAULT_RELATIONS};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entities: usize,
    pub forward_triples: usize,
    pub duplicate_triples: usize,
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> KgError {
    KgError::Io { path: path.display().to_string(), source }
}

/// Non-empty TSV rows with 1-based line numbers, each checked for `width`
/// fields.
pub(crate) fn read_rows(path: &Path, width: usize) -> Result<Vec<(usize, Vec<String>)>, KgError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file = path.display().to_string();
    let mut rows = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != width {
            return Err(KgError::Malformed {
                file: file.clone(),
                line: i + 1,
                msg: format!("expected {width} tab-separated fields, found {}", fields.len()),
            });
        }
        if fields.iter().any(String::is_empty) {
            return Err(KgError::Malformed { file: file.clone(), line: i + 1, msg: "empty field".into() });
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

pub(crate) fn read_entities_into(b: &mut KgBuilder, path: &Path) -> Result<(), KgError> {
    let file = path.display().to_string();
    for (line, f) in read_rows(path, 2)? {
        let kind: EntityKind = f[1]
            .parse()
            .map_err(|msg| KgError::Malformed { file: file.clone(), line, msg })?;
        b.add_entity(&f[0], kind).map_err(|e| match e {
            KgError::DuplicateEntity(n) => KgError::Malformed { file: file.clone(), line, msg: format!("duplicate entity `{n}`") },
            other => other,
        })?;
    }
    Ok(())
}

pub(crate) fn read_triples_into(b: &mut KgBuilder, path: &Path) -> Result<(), KgError> {
    let file = path.display().to_string();
    for (line, f) in read_rows(path, 3)? {
        let lookup = |name: &str| {
            b.entity_id(name)
                .ok_or_else(|| KgError::UnknownEntity { file: file.clone(), line, name: name.to_string() })
        };
        let head = lookup(&f[0])?;
        let tail = lookup(&f[2])?;
        let rel = b
            .relation_id(&f[1])
            .ok_or_else(|| KgError::UnknownRelation { file: file.clone(), line, name: f[1].clone() })?;
        b.add_triple_ids(head, rel, tail)?;
    }
    Ok(())
}

/// Loads `entities.tsv` and `triples.tsv` with the default relation
/// vocabulary and materialises inverses.
pub fn load_kg(triples: &Path, entities: &Path, purchase_relation: &str) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    load_kg_with_vocabulary(triples, entities, purchase_relation, DEFAULT_RELATIONS)
}

pub fn load_kg_with_vocabulary<I, S>(
    triples: &Path,
    entities: &Path,
    purchase_relation: &str,
    vocabulary: I,
) -> Result<(KnowledgeGraph, LoadReport), KgError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut b = KgBuilder::from_vocabulary(vocabulary)?.with_purchase_relation(purchase_relation)?;
    read_entities_into(&mut b, entities)?;
    read_triples_into(&mut b, triples)?;
    let kg = b.build();
    let report = LoadReport {
        entities: kg.num_entities(),
        forward_triples: kg.forward_triples().count(),
        duplicate_triples: b.duplicates(),
    };
    Ok((kg, report))
}

/// Reads `categories.tsv` rows as (item, category name) pairs.
pub fn read_categories(path: &Path, kg: &KnowledgeGraph) -> Result<CategoryAssignment, KgError> {
    let file = path.display().to_string();
    let mut pairs = Vec::new();
    for (line, f) in read_rows(path, 2)? {
        let item = kg
            .entity_id(&f[0])
            .ok_or_else(|| KgError::UnknownEntity { file: file.clone(), line, name: f[0].clone() })?;
        if !kg.is_item(item) {
            return Err(KgError::NotAnItem(f[0].clone()));
        }
        pairs.push((item, f[1].clone()));
    }
    CategoryAssignment::from_pairs(kg, pairs)
}

/// Reads `user\titem` rows.
pub fn read_interactions(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<(EntityId, EntityId)>, KgError> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (line, f) in read_rows(path, 2)? {
        let user = kg
            .entity_id(&f[0])
            .ok_or_else(|| KgError::UnknownEntity { file: file.clone(), line, name: f[0].clone() })?;
        let item = kg
            .entity_id(&f[1])
            .ok_or_else(|| KgError::UnknownEntity { file: file.clone(), line, name: f[1].clone() })?;
        if kg.kind(user) != EntityKind::User || kg.kind(item) != EntityKind::Item {
            return Err(KgError::Malformed {
                file: file.clone(),
                line,
                msg: format!("interaction must be user\\titem, got {} and {}", kg.kind(user), kg.kind(item)),
            });
        }
        out.push((user, item));
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), KgError> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn write_entities(path: &Path, kg: &KnowledgeGraph) -> Result<(), KgError> {
    write_lines(path, kg.entities().iter().map(|e| format!("{}\t{}", e.name, e.kind)))
}

/// Writes forward triples, optionally skipping purchase edges.
pub fn write_triples(path: &Path, kg: &KnowledgeGraph, include_purchases: bool) -> Result<(), KgError> {
    write_lines(
        path,
        kg.forward_triples()
            .filter(|t| include_purchases || t.relation != kg.purchase())
            .map(|t| format!("{}\t{}\t{}", kg.entity(t.head).name, kg.relation(t.relation).name, kg.entity(t.tail).name)),
    )
}

pub fn write_categories(path: &Path, kg: &KnowledgeGraph, assignment: &CategoryAssignment) -> Result<(), KgError> {
    let mut rows = Vec::new();
    for e in kg.entities_of_kind(EntityKind::Item) {
        for &c in assignment.categories_of(e) {
            rows.push(format!("{}\t{}", kg.entity(e).name, assignment.name(c)));
        }
    }
    write_lines(path, rows.into_iter())
}

pub fn write_interactions(path: &Path, kg: &KnowledgeGraph, pairs: &[(EntityId, EntityId)]) -> Result<(), KgError> {
    write_lines(path, pairs.iter().map(|(u, i)| format!("{}\t{}", kg.entity(*u).name, kg.entity(*i).name)))
}
