//! Browser bindings for three interactive views: fuzzy-match similarity with
//! its alignment, the oracle edit program turning one sentence into another,
//! and top-k retrieval from a pasted translation memory.
//!
//! Each export returns a JSON string; the plain functions below do the work
//! and are what the native tests call.

use serde_json::{json, Value};
use tmlevt::edit_calculus::{
    align, apply_delete, apply_placeholders, fill_tokens, oracle_delete_labels, oracle_insertion_labels,
};
use tmlevt::tm_index::{bucketize, edit_distance, similarity, NGramIndex, Window};
use tmlevt::SentenceRecord;
use wasm_bindgen::prelude::*;

const PLH: &str = "<plh>";

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Edit distance, similarity, bucket and the alignment of two sentences.
pub fn compare(a: &str, b: &str) -> Result<Value, String> {
    let (x, y) = (words(a), words(b));
    let sim = similarity(&x, &y).map_err(|e| e.to_string())?;
    Ok(json!({
        "distance": edit_distance(&x, &y),
        "sim": sim,
        "bucket": bucketize(sim).name(),
        "pairs": align(&x, &y).pairs,
    }))
}

/// The oracle deletion and insertion steps from `start` to `target`.
pub fn edit_program(start: &str, target: &str) -> Result<Value, String> {
    let (y, t) = (words(start), words(target));
    let err = |e: tmlevt::edit_calculus::EditError| e.to_string();
    let deleted = oracle_delete_labels(&y, &t);
    let kept = apply_delete(&y, &deleted).map_err(err)?;
    let labels = oracle_insertion_labels(&kept, &t).map_err(err)?;
    let plh = PLH.to_string();
    let with = apply_placeholders(&kept, &labels.counts, &plh).map_err(err)?;
    let filled = fill_tokens(&with, &labels.fills, &plh).map_err(err)?;
    Ok(json!({
        "start": y,
        "deleted": deleted,
        "kept": kept,
        "placeholders": labels.counts,
        "with_placeholders": with,
        "fills": labels.fills,
        "result": filled,
        "reached": filled == t,
    }))
}

/// Parse `source ||| target` lines into records; blank lines are skipped.
pub fn parse_memory(text: &str) -> Result<Vec<SentenceRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (src, tgt) = l
                .split_once("|||")
                .ok_or_else(|| format!("line {}: expected `source ||| target`", i + 1))?;
            if src.trim().is_empty() || tgt.trim().is_empty() {
                return Err(format!("line {}: empty side", i + 1));
            }
            Ok(SentenceRecord::new(i as u64, "demo", src.trim(), tgt.trim()))
        })
        .collect()
}

/// Top-`k` matches of `query` in the memory with similarity at least `sim_min`.
pub fn search(memory: &str, query: &str, k: usize, sim_min: f64) -> Result<Value, String> {
    let records = parse_memory(memory)?;
    if records.is_empty() {
        return Ok(json!([]));
    }
    let index = NGramIndex::build(&records, 3).map_err(|e| e.to_string())?;
    // exact repeats are shown as well
    let window = Window::new(k, sim_min, 1.5).map_err(|e| e.to_string())?;
    let matches = index.retrieve(&words(query), window, None);
    Ok(Value::Array(
        matches
            .into_iter()
            .map(|m| {
                json!({
                    "line": m.segment_id + 1,
                    "sim": m.sim,
                    "bucket": bucketize(m.sim).name(),
                    "src": m.src_tokens.join(" "),
                    "tgt": m.tgt_tokens.join(" "),
                })
            })
            .collect(),
    ))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = compare)]
pub fn compare_js(a: &str, b: &str) -> Result<String, JsValue> {
    to_js(compare(a, b))
}

#[wasm_bindgen(js_name = editProgram)]
pub fn edit_program_js(start: &str, target: &str) -> Result<String, JsValue> {
    to_js(edit_program(start, target))
}

#[wasm_bindgen(js_name = search)]
pub fn search_js(memory: &str, query: &str, k: usize, sim_min: f64) -> Result<String, JsValue> {
    to_js(search(memory, query, k, sim_min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_reports_alignment() {
        let v = compare("a b c", "a x c").unwrap();
        assert_eq!(v["distance"], 1);
        assert_eq!(v["pairs"], json!([[0, 0], [2, 2]]));
        assert!(compare("", "").is_err());
    }

    #[test]
    fn program_reaches_target() {
        let v = edit_program("the red car", "the blue car").unwrap();
        assert_eq!(v["reached"], true);
        assert_eq!(v["deleted"], json!([false, true, false]));
        assert_eq!(v["fills"], json!(["blue"]));
    }
}
