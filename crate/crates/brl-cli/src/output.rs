//! Output documents: CSV with `#` metadata lines and JSON with a `meta`
//! object, both byte-deterministic for a fixed materialized config.

use std::io::Write;

use crate::config::RunConfig;

/// Tool version stamped into every document.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One tabular result set: a fixed column list and stringified cells.
#[derive(Clone, Debug, Default)]
pub struct RunTable {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl RunTable {
    pub fn new(columns: Vec<&'static str>) -> Self {
        RunTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Canonical cell text for a float: shortest round-trip form, so documents
/// are byte-stable and lossless.
pub fn cell(x: f64) -> String {
    x.to_string()
}

/// CSV document: `# brl <version>`, one `# key = value` line per
/// materialized config field, a header row, then data rows.
pub fn csv_document(config: &RunConfig, table: &RunTable) -> String {
    let mut doc = String::new();
    doc.push_str(&format!("# brl {TOOL_VERSION}\n"));
    for (key, value) in config.to_key_values() {
        doc.push_str(&format!("# {key} = {value}\n"));
    }
    doc.push_str(&table.columns.join(","));
    doc.push('\n');
    for row in &table.rows {
        doc.push_str(&row.join(","));
        doc.push('\n');
    }
    doc
}

/// JSON document: `{"meta": {tool, version, seed, config}, "rows": [...]}`
/// with row cells typed as numbers where they parse as finite floats.
pub fn json_document(config: &RunConfig, table: &RunTable) -> String {
    let mut meta = serde_json::Map::new();
    meta.insert("tool".to_string(), serde_json::Value::from("brl"));
    meta.insert(
        "version".to_string(),
        serde_json::Value::from(TOOL_VERSION),
    );
    meta.insert("seed".to_string(), serde_json::Value::from(config.seed));
    meta.insert(
        "config".to_string(),
        serde_json::to_value(config).expect("config serializes"),
    );
    let rows: Vec<serde_json::Value> = table
        .rows
        .iter()
        .map(|row| {
            let mut object = serde_json::Map::new();
            for (column, value) in table.columns.iter().zip(row) {
                object.insert(column.to_string(), typed_cell(value));
            }
            serde_json::Value::Object(object)
        })
        .collect();
    let mut document = serde_json::Map::new();
    document.insert("meta".to_string(), serde_json::Value::Object(meta));
    document.insert("rows".to_string(), serde_json::Value::Array(rows));
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(document))
        .expect("document serializes");
    text.push('\n');
    text
}

fn typed_cell(value: &str) -> serde_json::Value {
    if value == "true" || value == "false" {
        return serde_json::Value::from(value == "true");
    }
    if let Ok(parsed) = value.parse::<f64>() {
        if parsed.is_finite() {
            if let Some(number) = serde_json::Number::from_f64(parsed) {
                return serde_json::Value::Number(number);
            }
        }
    }
    serde_json::Value::from(value)
}

/// Renders the document for the configured format.
pub fn render(config: &RunConfig, table: &RunTable) -> String {
    if config.format == "json" {
        json_document(config, table)
    } else {
        csv_document(config, table)
    }
}

/// Writes a document to the configured destination; `-` appends it to
/// stdout.
pub fn write_document(out: &str, document: &str) -> std::io::Result<()> {
    if out == "-" {
        let stdout = std::io::stdout();
        let mut handle = stdout.lock();
        handle.write_all(document.as_bytes())?;
        handle.flush()
    } else {
        std::fs::write(out, document)
    }
}
