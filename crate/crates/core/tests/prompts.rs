mod common;

use std::fs;

use clnlu::llmclient::Role;
use clnlu::prompts::{format_choices, format_contexts, Binding, PromptRegistry, PromptTemplate};
use clnlu::textproc::Script;
use clnlu::PromptError;

/// Renders with every placeholder bound to its own `{NAME}` text.
fn render_self(reg: &PromptRegistry, id: &str, script: Script) -> String {
    let t = reg.get(id).unwrap();
    let b: Binding = t.used_placeholders().iter().map(|p| (p.to_string(), format!("{{{p}}}"))).collect();
    let mut out = String::new();
    for m in reg.render(id, &b, script).unwrap() {
        let role = match m.role {
            Role::System => "system",
            Role::Human => "human",
        };
        out.push_str(&format!("@@ {role}\n{}\n", m.content));
    }
    out
}

#[test]
fn sanskrit_templates_render_to_reference_iast() {
    let reg = PromptRegistry::builtin();
    let mut n = 0;
    for entry in fs::read_dir(common::fixture("prompts_iast")).unwrap() {
        let path = entry.unwrap().path();
        let id = path.file_stem().unwrap().to_str().unwrap();
        // the reference keeps the template's brace escapes
        let want = fs::read_to_string(&path).unwrap().replace("{{", "{").replace("}}", "}");
        assert_eq!(render_self(&reg, id, Script::Iast), want, "{id}");
        n += 1;
    }
    assert_eq!(n, 9);
}

#[test]
fn devanagari_and_iast_renderings_agree() {
    let reg = PromptRegistry::builtin();
    for id in reg.ids().filter(|id| id.ends_with(".san") || id.starts_with("tog.")) {
        let deva = render_self(&reg, id, Script::Devanagari);
        let back = clnlu::textproc::to_canonical_mixed(&deva);
        let iast = clnlu::textproc::to_canonical_mixed(&render_self(&reg, id, Script::Iast));
        assert_eq!(back, iast, "{id}");
    }
}

#[test]
fn every_builtin_declares_what_it_uses() {
    let reg = PromptRegistry::builtin();
    let ids: Vec<&str> = reg.ids().collect();
    assert_eq!(ids.len(), 17);
    for id in ids {
        let t = reg.get(id).unwrap();
        assert!(!t.used_placeholders().is_empty(), "{id} uses no placeholder");
    }
}

#[test]
fn bound_values_are_not_transliterated() {
    let reg = PromptRegistry::builtin();
    let b: Binding = [("QUESTION", "rAma?"), ("CHOICES", "")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let msgs = reg.render("tog.extract_entities", &b, Script::Devanagari).unwrap();
    assert!(msgs[1].content.ends_with("rAma? "), "{:?}", msgs[1].content);
    let mut partial = b.clone();
    partial.remove("CHOICES");
    assert!(matches!(
        reg.render("tog.extract_entities", &partial, Script::Iast),
        Err(PromptError::MissingPlaceholder(p)) if p == "CHOICES"
    ));
}

#[test]
fn malformed_templates_are_rejected() {
    let head = "---\nid: x\ntask: mt\nlanguage: en\nscript: verbatim\nplaceholders: INPUT\n---\n";
    assert!(PromptTemplate::parse(&format!("{head}@@ human\n{{INPUT}} {{{{literal}}}}\n"), "x").is_ok());
    assert!(PromptTemplate::parse(&format!("{head}@@ human\n{{OTHER}}\n"), "x").is_err());
    assert!(PromptTemplate::parse(&format!("{head}@@ robot\nhi\n"), "x").is_err());
    assert!(PromptTemplate::parse(&format!("{head}stray\n@@ human\n{{INPUT}}\n"), "x").is_err());
    assert!(PromptTemplate::parse("@@ human\nhi\n", "x").is_err());
}

#[test]
fn template_directory_follows_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("mt.en.tmpl"),
        "---\nid: mt.en\ntask: mt\nlanguage: en\nscript: verbatim\nplaceholders: INPUT\n---\n@@ human\nTranslate: {INPUT}\n",
    )
    .unwrap();
    fs::write(dir.path().join("manifest.txt"), "# one template\nmt.en.tmpl\n").unwrap();
    let reg = PromptRegistry::load_dir(dir.path()).unwrap();
    let b: Binding = [("INPUT".to_string(), "arma".to_string())].into();
    assert_eq!(reg.render("mt.en", &b, Script::Iast).unwrap()[0].content, "Translate: arma");
    assert_eq!(reg.ids().count(), 1);
    fs::remove_file(dir.path().join("manifest.txt")).unwrap();
    assert!(matches!(PromptRegistry::load_dir(dir.path()), Err(PromptError::Io(_))));
}

#[test]
fn list_formatting() {
    assert_eq!(format_choices::<&str>(&[]), "");
    assert!(format_choices(&["a", "b"]).contains('a'));
    let c = format_contexts(&["x", "y"]);
    assert!(c.find('x').unwrap() < c.find('y').unwrap());
}
