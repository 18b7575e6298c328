use tmlevt_web::{parse_memory, search};

const MEMORY: &str = "\
close the door ||| ferme la porte
close the window ||| ferme la fenêtre

open the door now ||| ouvre la porte maintenant
";

#[test]
fn ranks_by_similarity() {
    let hits = search(MEMORY, "close the door", 3, 0.3).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits[0]["tgt"], "ferme la porte");
    assert_eq!(hits[0]["sim"], 1.0);
    assert_eq!(hits[1]["line"], 2);
    assert!(hits.windows(2).all(|w| w[0]["sim"].as_f64() >= w[1]["sim"].as_f64()));
}

#[test]
fn rejects_malformed_lines() {
    assert!(parse_memory("no separator here").is_err());
    assert!(parse_memory(" ||| x").is_err());
    assert_eq!(search("", "q", 3, 0.0).unwrap(), serde_json::json!([]));
}
