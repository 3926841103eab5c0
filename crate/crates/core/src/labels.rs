//! Closed label sets: emotions, dialog acts and topics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! label_set {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|l| l.name() == s)
                    .ok_or_else(|| format!("unknown {} label `{s}`", stringify!($name).to_lowercase()))
            }
        }
    };
}

label_set!(
    /// DailyDialog emotion classes, in digit order 0..=6.
    Emotion {
        NoEmotion => "no-emotion",
        Anger => "anger",
        Disgust => "disgust",
        Fear => "fear",
        Happiness => "happiness",
        Sadness => "sadness",
        Surprise => "surprise",
    }
);

label_set!(
    /// Dialog acts, DailyDialog digits 1..=4.
    Act {
        Inform => "inform",
        Question => "question",
        Directive => "directive",
        Commissive => "commissive",
    }
);

label_set!(
    /// Conversation topics, DailyDialog digits 1..=10.
    Topic {
        OrdinaryLife => "ordinary-life",
        SchoolLife => "school-life",
        CultureEducation => "culture-education",
        AttitudeEmotion => "attitude-emotion",
        Relationship => "relationship",
        Tourism => "tourism",
        Health => "health",
        Work => "work",
        Politics => "politics",
        Finance => "finance",
    }
);

impl Emotion {
    pub fn from_digit(d: u32) -> Option<Self> {
        Self::from_index(d as usize)
    }

    pub fn digit(self) -> u32 {
        self.index() as u32
    }
}

impl Act {
    pub fn from_digit(d: u32) -> Option<Self> {
        d.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }

    pub fn digit(self) -> u32 {
        self.index() as u32 + 1
    }
}

impl Topic {
    pub fn from_digit(d: u32) -> Option<Self> {
        d.checked_sub(1).and_then(|i| Self::from_index(i as usize))
    }

    pub fn digit(self) -> u32 {
        self.index() as u32 + 1
    }
}

/// The two alternating dialog participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Speaker {
    First,
    Second,
}

impl Speaker {
    /// Speaker of the utterance at `index` in a conversation.
    pub fn of_turn(index: usize) -> Self {
        if index % 2 == 0 {
            Speaker::First
        } else {
            Speaker::Second
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::First => Speaker::Second,
            Speaker::Second => Speaker::First,
        }
    }
}
