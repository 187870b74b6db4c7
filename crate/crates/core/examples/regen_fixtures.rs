//! Rewrites the bundled discovery fixtures from the generator.

use std::path::Path;

use x402_testbed::discovery::fixture::{catalog_to_json, queries_to_json, synthetic_market, FIXTURE_SEED};

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let (catalog, queries) = synthetic_market(FIXTURE_SEED);
    std::fs::write(dir.join("catalog.json"), catalog_to_json(&catalog))?;
    std::fs::write(dir.join("queries.json"), queries_to_json(&queries))?;
    println!("wrote {} listings, {} query sets", catalog.len(), queries.len());
    Ok(())
}
