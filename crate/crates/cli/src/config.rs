//! Flat `key=value` config files.
//!
//! Each entry becomes `--key value` inserted right after the subcommand path,
//! ahead of the user's own flags, so flags given on the command line win.
//! `true` gives a bare switch and `false` drops the entry.

use std::ffi::OsString;
use std::path::Path;

use anyhow::Context;

use crate::Exit;

pub fn parse(text: &str, origin: &Path) -> anyhow::Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Exit::usage(format!("{}:{}: expected key=value", origin.display(), lineno + 1))
        })?;
        let key = key.trim().trim_start_matches('-');
        let value = value.trim();
        if key.is_empty() {
            return Err(Exit::usage(format!("{}:{}: empty key", origin.display(), lineno + 1)));
        }
        if key == "config" {
            return Err(Exit::usage(format!("{}:{}: nested config files", origin.display(), lineno + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Remove `--config FILE` from `argv` and splice in the file's flags.
pub fn inject(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut it = argv.into_iter();
    while let Some(tok) = it.next() {
        match tok.to_str() {
            Some("--config") => {
                path = Some(it.next().ok_or_else(|| Exit::usage("--config needs a file"))?);
            }
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(tok),
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| Exit::usage(format!("{e:#}")))?;
    let extra = parse(&text, path)?;
    let at = subcommand_end(&rest);
    rest.splice(at..at, extra);
    Ok(rest)
}

/// Index just past the last subcommand name in `argv`.
fn subcommand_end(argv: &[OsString]) -> usize {
    let root = crate::command();
    let mut cur = &root;
    let mut end = argv.len().min(1);
    let mut i = 1;
    while i < argv.len() {
        let Some(tok) = argv[i].to_str() else { break };
        if let Some(long) = tok.strip_prefix("--") {
            let takes_value = !long.contains('=')
                && cur
                    .get_arguments()
                    .chain(root.get_arguments())
                    .find(|a| a.get_long() == Some(long))
                    .is_some_and(|a| a.get_action().takes_values());
            i += if takes_value { 2 } else { 1 };
            continue;
        }
        if tok.starts_with('-') {
            i += 1;
            continue;
        }
        match cur.find_subcommand(tok) {
            Some(sub) => {
                cur = sub;
                i += 1;
                end = i;
            }
            None => break,
        }
    }
    end
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_switches_and_comments() {
        let got = parse("# c\nm = 256\n--depth=5\nsections=true\nsave-snapshots=false\n\n", Path::new("x")).unwrap();
        assert_eq!(got, os(&["--m", "256", "--depth", "5", "--sections"]));
        assert!(parse("novalue\n", Path::new("x")).is_err());
    }

    #[test]
    fn inserts_after_subcommand_path() {
        let argv = os(&["ntkw", "--seed", "3", "bound", "ntrf", "--R", "5"]);
        assert_eq!(subcommand_end(&argv), 5);
        let argv = os(&["ntkw", "verify", "--lemma", "norms"]);
        assert_eq!(subcommand_end(&argv), 2);
    }
}
