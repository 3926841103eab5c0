//! `--history` values: a file or inline text, either a JSON array or
//! utterances separated by newlines or `__eou__`.

use std::path::Path;

use anyhow::{Context, Result};
use empt_core::input::Turn;
use empt_core::Speaker;
use empt_serve::api::HistoryTurn;
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(untagged)]
enum Entry {
    Text(String),
    Labeled(HistoryTurn),
}

pub fn read(arg: &str) -> Result<Vec<Turn>> {
    let path = Path::new(arg);
    let text = if !arg.is_empty() && path.is_file() {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else {
        arg.to_string()
    };
    parse(&text)
}

/// Plain utterances alternate speakers starting with speaker 1.
pub fn parse(text: &str) -> Result<Vec<Turn>> {
    if text.trim_start().starts_with('[') {
        let entries: Vec<Entry> = serde_json::from_str(text).context("parsing the history as JSON")?;
        return Ok(entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| match e {
                Entry::Text(text) => Turn {
                    speaker: Speaker::of_turn(i),
                    text,
                    emotion: None,
                    act: None,
                },
                Entry::Labeled(t) => Turn {
                    speaker: t.speaker.speaker(),
                    text: t.text,
                    emotion: t.emotion,
                    act: t.act,
                },
            })
            .collect());
    }
    Ok(text
        .split(['\n'])
        .flat_map(|line| line.split("__eou__"))
        .map(str::trim)
        .filter(|u| !u.is_empty())
        .enumerate()
        .map(|(i, u)| Turn {
            speaker: Speaker::of_turn(i),
            text: u.to_string(),
            emotion: None,
            act: None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use empt_core::Emotion;

    #[test]
    fn plain_and_json_forms() {
        let h = parse("hi there __eou__ hello\nhow are you").unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h[1].speaker, Speaker::Second);
        assert_eq!(h[2].text, "how are you");
        assert!(parse("  ").unwrap().is_empty());

        let h = parse(r#"["hi", {"speaker": 1, "text": "yo", "emotion": "anger"}]"#).unwrap();
        assert_eq!(h[0].speaker, Speaker::First);
        assert_eq!(h[1].speaker, Speaker::First);
        assert_eq!(h[1].emotion, Some(Emotion::Anger));
        assert!(parse(r#"[{"speaker": 1, "text": "yo", "emotion": "joyful"}]"#).is_err());
    }
}
