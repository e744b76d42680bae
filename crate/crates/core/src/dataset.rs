//! Fact tables → prompts, answer matching, and balanced train/test splits.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capture::{InnerStateRecord, Label};
use crate::error::{Error, Result};

pub const ENTITY_PLACEHOLDER: &str = "{entity}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactTriple {
    pub entity: String,
    pub relation: String,
    pub target: String,
    pub category: String,
}

/// A CSV-like table with a header row.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("unreadable CSV header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Schema(format!("malformed CSV row: {e}")))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found; available: {}", self.headers.join(", "))))
    }
}

#[derive(Clone, Debug)]
pub struct ColumnMapping {
    pub entity: String,
    pub target: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub triples: Vec<FactTriple>,
    /// Rows skipped because a mapped cell was empty.
    pub dropped: usize,
}

/// One triple per table row; rows whose entity or target cell is blank are
/// dropped and counted.
pub fn ingest_facts(table: &Table, mapping: &ColumnMapping, relation: &str, category: &str) -> Result<Ingested> {
    if relation.trim().is_empty() || category.trim().is_empty() {
        return Err(Error::Schema("relation and category tags must be non-empty".into()));
    }
    let ei = table.column(&mapping.entity)?;
    let ti = table.column(&mapping.target)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyDataset("table has no data rows".into()));
    }
    let mut triples = Vec::new();
    let mut dropped = 0;
    for row in &table.rows {
        let cell = |i: usize| row.get(i).map(|s| s.trim()).unwrap_or("");
        let (entity, target) = (cell(ei), cell(ti));
        if entity.is_empty() || target.is_empty() {
            dropped += 1;
            continue;
        }
        triples.push(FactTriple {
            entity: entity.to_string(),
            relation: relation.to_string(),
            target: target.to_string(),
            category: category.to_string(),
        });
    }
    if triples.is_empty() {
        return Err(Error::EmptyDataset(format!("all {dropped} rows had empty mapped cells")));
    }
    Ok(Ingested { triples, dropped })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub relation: String,
    pub pattern: String,
    pub template_id: usize,
}

impl PromptTemplate {
    pub fn new(relation: &str, pattern: &str, template_id: usize) -> Result<Self> {
        let count = pattern.matches(ENTITY_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Config(format!(
                "template `{pattern}` for relation `{relation}` must contain {ENTITY_PLACEHOLDER} exactly once (found {count})"
            )));
        }
        let rest = pattern.replacen(ENTITY_PLACEHOLDER, "", 1);
        if rest.contains('{') || rest.contains('}') {
            return Err(Error::Config(format!(
                "template `{pattern}` for relation `{relation}` has a placeholder other than {ENTITY_PLACEHOLDER}"
            )));
        }
        Ok(Self {
            relation: relation.to_string(),
            pattern: pattern.to_string(),
            template_id,
        })
    }

    pub fn render(&self, entity: &str) -> String {
        self.pattern.replacen(ENTITY_PLACEHOLDER, entity, 1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RelationSpec {
    pub category: String,
    pub templates: Vec<PromptTemplate>,
}

/// Declared relations with their category and synonymous templates.
///
/// Text form, one section per relation:
///
/// ```text
/// [movie-director]
/// category = Art
/// templates =
///     The film titled {entity} was directed by
///     The director of {entity} is
/// ```
#[derive(Clone, Debug, Default)]
pub struct TemplateRegistry {
    pub relations: BTreeMap<String, RelationSpec>,
}

impl TemplateRegistry {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reg = TemplateRegistry::default();
        let mut current: Option<String> = None;
        let mut in_templates = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| Error::Config(format!("registry line {}: {m}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(err("empty relation name"));
                }
                if reg.relations.contains_key(name) {
                    return Err(err(&format!("relation `{name}` declared twice")));
                }
                reg.relations.insert(name.to_string(), RelationSpec::default());
                current = Some(name.to_string());
                in_templates = false;
                continue;
            }
            let rel = current.clone().ok_or_else(|| err("entry outside a [relation] section"))?;
            let indented = raw.starts_with(' ') || raw.starts_with('\t');
            if in_templates && (indented || !line.contains('=')) {
                let spec = reg.relations.get_mut(&rel).unwrap();
                let id = spec.templates.len();
                spec.templates.push(PromptTemplate::new(&rel, line, id)?);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let spec = reg.relations.get_mut(&rel).unwrap();
            match key {
                "category" => {
                    spec.category = value.to_string();
                    in_templates = false;
                }
                "templates" => {
                    in_templates = true;
                    if !value.is_empty() {
                        let id = spec.templates.len();
                        spec.templates.push(PromptTemplate::new(&rel, value, id)?);
                    }
                }
                other => return Err(err(&format!("unknown key `{other}`"))),
            }
        }
        for (name, spec) in &reg.relations {
            if spec.category.is_empty() {
                return Err(Error::Config(format!("relation `{name}` has no category")));
            }
        }
        Ok(reg)
    }

    pub fn contains(&self, relation: &str) -> bool {
        self.relations.contains_key(relation)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptRecord {
    pub prompt: String,
    pub answer: String,
    pub relation: String,
    pub category: String,
    pub template_id: usize,
}

/// One prompt per (triple, template) pair.
pub fn render_prompts(triples: &[FactTriple], registry: &TemplateRegistry) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for t in triples {
        let spec = registry
            .relations
            .get(&t.relation)
            .filter(|s| !s.templates.is_empty())
            .ok_or_else(|| Error::Config(format!("relation `{}` has no template", t.relation)))?;
        for tpl in &spec.templates {
            out.push(PromptRecord {
                prompt: tpl.render(&t.entity),
                answer: t.target.clone(),
                relation: t.relation.clone(),
                category: t.category.clone(),
                template_id: tpl.template_id,
            });
        }
    }
    Ok(out)
}

fn tsv_field(s: &str) -> Result<&str> {
    if s.contains('\t') || s.contains('\n') {
        return Err(Error::Data(format!("field `{s}` contains a tab or newline")));
    }
    Ok(s)
}

/// Tab-separated prompt file: prompt, answer, relation, category, template_id.
pub fn write_prompt_file(records: &[PromptRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            tsv_field(&r.prompt)?,
            tsv_field(&r.answer)?,
            tsv_field(&r.relation)?,
            tsv_field(&r.category)?,
            r.template_id
        )?;
    }
    Ok(())
}

pub fn read_prompt_file(input: impl BufRead) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!("prompt file line {}: expected 5 fields, got {}", i + 1, f.len())));
        }
        let template_id = f[4]
            .parse()
            .map_err(|_| Error::Data(format!("prompt file line {}: bad template id `{}`", i + 1, f[4])))?;
        out.push(PromptRecord {
            prompt: f[0].to_string(),
            answer: f[1].to_string(),
            relation: f[2].to_string(),
            category: f[3].to_string(),
            template_id,
        });
    }
    Ok(out)
}

/// Tab-separated fact file: entity, relation, target, category.
pub fn write_fact_file(triples: &[FactTriple], mut out: impl Write) -> Result<()> {
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            tsv_field(&t.entity)?,
            tsv_field(&t.relation)?,
            tsv_field(&t.target)?,
            tsv_field(&t.category)?
        )?;
    }
    Ok(())
}

pub fn read_fact_file(input: impl BufRead) -> Result<Vec<FactTriple>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("fact file line {}: expected 4 fields, got {}", i + 1, f.len())));
        }
        out.push(FactTriple {
            entity: f[0].to_string(),
            relation: f[1].to_string(),
            target: f[2].to_string(),
            category: f[3].to_string(),
        });
    }
    Ok(out)
}

/// First whitespace-delimited word, stripped of surrounding punctuation and
/// lowercased.
pub fn normalize_first_word(text: &str) -> String {
    text.split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn first_words_match(generated: &str, answer: &str) -> bool {
    let g = normalize_first_word(generated);
    !g.is_empty() && g == normalize_first_word(answer)
}

/// The first generated word, rebuilt from subword tokens up to the first
/// whitespace boundary.
pub fn first_word_from_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let joined: String = tokens.iter().map(|t| t.as_ref()).collect();
    joined.split_whitespace().next().unwrap_or("").to_string()
}

pub fn label_by_first_word<S: AsRef<str>>(tokens: &[S], answer: &str) -> Label {
    if first_words_match(&first_word_from_tokens(tokens), answer) {
        Label::Factual
    } else {
        Label::Nonfactual
    }
}

/// Records that can be balanced and stratified.
pub trait Stratified {
    fn relation(&self) -> &str;
    fn label(&self) -> Label;
}

impl Stratified for InnerStateRecord {
    fn relation(&self) -> &str {
        &self.relation
    }
    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Clone, Debug)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    /// Relations dropped because one label had no examples.
    pub dropped_relations: Vec<String>,
}

/// Balance labels within each relation by uniformly downsampling the
/// majority, then split every (relation, label) stratum at `train_fraction`.
/// Deterministic for a given seed.
pub fn balance_and_split<T: Stratified>(records: Vec<T>, train_fraction: f64, seed: u64) -> Result<Split<T>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::param(format!("train_fraction {train_fraction} outside (0,1)")));
    }
    let mut groups: BTreeMap<String, (Vec<T>, Vec<T>)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(r.relation().to_string()).or_default();
        match r.label() {
            Label::Factual => entry.0.push(r),
            Label::Nonfactual => entry.1.push(r),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
        dropped_relations: Vec::new(),
    };
    for (relation, (mut fact, mut nonfact)) in groups {
        if fact.is_empty() || nonfact.is_empty() {
            log::warn!(
                "dropping relation `{relation}`: {} factual / {} non-factual",
                fact.len(),
                nonfact.len()
            );
            split.dropped_relations.push(relation);
            continue;
        }
        let n = fact.len().min(nonfact.len());
        let n_train = ((n as f64) * train_fraction).round() as usize;
        for stratum in [&mut fact, &mut nonfact] {
            stratum.shuffle(&mut rng);
            stratum.truncate(n);
            let test_part = stratum.split_off(n_train);
            split.train.append(stratum);
            split.test.extend(test_part);
        }
    }
    Ok(split)
}

/// Per-relation (factual, non-factual) counts.
pub fn label_counts<T: Stratified>(records: &[T]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.relation().to_string()).or_default();
        match r.label() {
            Label::Factual => e.0 += 1,
            Label::Nonfactual => e.1 += 1,
        }
    }
    out
}

pub fn relations<T: Stratified>(records: &[T]) -> Vec<String> {
    let set: HashSet<&str> = records.iter().map(|r| r.relation()).collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    v.sort();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str)]) -> Table {
        Table {
            headers: vec!["title".into(), "author".into()],
            rows: rows.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect(),
        }
    }

    fn mapping() -> ColumnMapping {
        ColumnMapping {
            entity: "title".into(),
            target: "author".into(),
        }
    }

    #[test]
    fn ingests_book_author_row() {
        let out = ingest_facts(&table(&[("Twilight", "Stephenie Meyer")]), &mapping(), "book-author", "Literary").unwrap();
        assert_eq!(
            out.triples,
            vec![FactTriple {
                entity: "Twilight".into(),
                relation: "book-author".into(),
                target: "Stephenie Meyer".into(),
                category: "Literary".into(),
            }]
        );
        assert_eq!(out.dropped, 0);
    }

    #[test]
    fn empty_cells_are_dropped_and_counted() {
        let out = ingest_facts(&table(&[("Twilight", "")]), &mapping(), "book-author", "Literary");
        assert!(matches!(out, Err(Error::EmptyDataset(_))));
        let out = ingest_facts(
            &table(&[("Twilight", "Stephenie Meyer"), ("Dune", " "), ("Emma", "Jane Austen")]),
            &mapping(),
            "book-author",
            "Literary",
        )
        .unwrap();
        assert_eq!(out.triples.len(), 2);
        assert_eq!(out.dropped, 1);
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let m = ColumnMapping {
            entity: "name".into(),
            target: "author".into(),
        };
        assert!(matches!(ingest_facts(&table(&[("a", "b")]), &m, "r", "c"), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_table_parses() {
        let t = Table::from_csv("title,author\nTwilight,Stephenie Meyer\n\"A, B\",X\n".as_bytes()).unwrap();
        assert_eq!(t.headers, ["title", "author"]);
        assert_eq!(t.rows[1][0], "A, B");
    }

    #[test]
    fn renders_director_prompt() {
        let reg = TemplateRegistry::parse(
            "[movie-director]\ncategory = Art\ntemplates =\n    The film titled {entity} was directed by\n",
        )
        .unwrap();
        let triple = FactTriple {
            entity: "The Shining".into(),
            relation: "movie-director".into(),
            target: "Stanley Kubrick".into(),
            category: "Art".into(),
        };
        let out = render_prompts(&[triple], &reg).unwrap();
        assert_eq!(out[0].prompt, "The film titled The Shining was directed by");
        assert_eq!(out[0].answer, "Stanley Kubrick");
        assert!(!out[0].prompt.contains(&out[0].answer));
    }

    #[test]
    fn one_record_per_template() {
        let reg = TemplateRegistry::parse(
            "[r]\ncategory = C\ntemplates =\n  A {entity}\n  B {entity}\n  C {entity} x\n",
        )
        .unwrap();
        let t = FactTriple {
            entity: "e".into(),
            relation: "r".into(),
            target: "t".into(),
            category: "C".into(),
        };
        let out = render_prompts(&[t], &reg).unwrap();
        assert_eq!(out.len(), 3);
        let ids: HashSet<usize> = out.iter().map(|r| r.template_id).collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn relation_without_template_is_a_config_error() {
        let reg = TemplateRegistry::parse("[r]\ncategory = C\n").unwrap();
        let t = FactTriple {
            entity: "e".into(),
            relation: "r".into(),
            target: "t".into(),
            category: "C".into(),
        };
        match render_prompts(&[t], &reg) {
            Err(Error::Config(m)) => assert!(m.contains("`r`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_without_placeholder_is_rejected_at_load() {
        assert!(TemplateRegistry::parse("[r]\ncategory = C\ntemplates =\n  no placeholder here\n").is_err());
        assert!(PromptTemplate::new("r", "{entity} and {entity}", 0).is_err());
        assert!(PromptTemplate::new("r", "{entity} by {author}", 0).is_err());
    }

    #[test]
    fn prompt_file_round_trips() {
        let recs = vec![PromptRecord {
            prompt: "Albert Einstein is".into(),
            answer: "Germany".into(),
            relation: "person-country".into(),
            category: "Geography".into(),
            template_id: 2,
        }];
        let mut buf = Vec::new();
        write_prompt_file(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "Albert Einstein is\tGermany\tperson-country\tGeography\t2\n");
        assert_eq!(read_prompt_file(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn first_word_labeling() {
        assert_eq!(label_by_first_word(&[" Stan", "ley", " Kub", "rick"], "Stanley Kubrick"), Label::Factual);
        assert_eq!(label_by_first_word(&["Germany"], "Germany"), Label::Factual);
        assert_eq!(label_by_first_word(&["France"], "Germany"), Label::Nonfactual);
        assert_eq!(label_by_first_word(&[" \"Germany,\""], "germany"), Label::Factual);
        // multi-word answers compare on the first word only
        assert_eq!(label_by_first_word(&["Bill"], "Bill Gates"), Label::Factual);
    }

    #[derive(Clone, Debug, PartialEq)]
    struct Item {
        rel: String,
        label: Label,
        id: usize,
    }

    impl Stratified for Item {
        fn relation(&self) -> &str {
            &self.rel
        }
        fn label(&self) -> Label {
            self.label
        }
    }

    fn items(rel: &str, fact: usize, nonfact: usize, start: usize) -> Vec<Item> {
        (0..fact + nonfact)
            .map(|i| Item {
                rel: rel.into(),
                label: if i < fact { Label::Factual } else { Label::Nonfactual },
                id: start + i,
            })
            .collect()
    }

    #[test]
    fn downsamples_majority_to_minority_count() {
        let s = balance_and_split(items("a", 30, 10, 0), 0.5, 1).unwrap();
        let all: Vec<_> = s.train.iter().chain(&s.test).collect();
        assert_eq!(all.iter().filter(|i| i.label == Label::Factual).count(), 10);
        assert_eq!(all.iter().filter(|i| i.label == Label::Nonfactual).count(), 10);
    }

    #[test]
    fn eighty_twenty_balanced() {
        let s = balance_and_split(items("a", 50, 50, 0), 0.8, 3).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.test.len(), 20);
        assert_eq!(label_counts(&s.train)["a"], (40, 40));
        assert_eq!(label_counts(&s.test)["a"], (10, 10));
    }

    #[test]
    fn same_seed_same_split_and_single_label_relations_dropped() {
        let mut recs = items("a", 20, 13, 0);
        recs.extend(items("b", 5, 0, 100));
        let s1 = balance_and_split(recs.clone(), 0.8, 9).unwrap();
        let s2 = balance_and_split(recs, 0.8, 9).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.test, s2.test);
        assert_eq!(s1.dropped_relations, vec!["b".to_string()]);
        let train_ids: HashSet<usize> = s1.train.iter().map(|i| i.id).collect();
        assert!(s1.test.iter().all(|i| !train_ids.contains(&i.id)));
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(balance_and_split(items("a", 2, 2, 0), 1.0, 0).is_err());
        assert!(balance_and_split(items("a", 2, 2, 0), 0.0, 0).is_err());
    }
}
