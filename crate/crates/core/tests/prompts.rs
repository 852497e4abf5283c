mod common;

use common::*;

fn check(name: &str, rendered: &str) {
    let path = fixture_path(name);
    if std::env::var_os("PKTL_BLESS").is_some() {
        std::fs::write(&path, rendered).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(rendered, want, "{name} drifted from its fixture");
}

#[test]
fn pk_prompt_matches_fixture() {
    check("pk_prompt.txt", &render_golden_pk().text);
}

#[test]
fn static_prompt_matches_fixture() {
    check("static_prompt.txt", &render_golden_static().text);
}
