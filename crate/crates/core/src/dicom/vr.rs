use std::fmt;

use serde::{Deserialize, Serialize};

/// Value representations understood by the codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vr {
    AE,
    AS,
    CS,
    DA,
    DS,
    DT,
    IS,
    LO,
    LT,
    PN,
    SH,
    ST,
    TM,
    UI,
    UL,
    US,
    SS,
    SL,
    FL,
    FD,
    OB,
    OW,
    SQ,
    UN,
}

impl Vr {
    pub const ALL: [Vr; 24] = [
        Vr::AE,
        Vr::AS,
        Vr::CS,
        Vr::DA,
        Vr::DS,
        Vr::DT,
        Vr::IS,
        Vr::LO,
        Vr::LT,
        Vr::PN,
        Vr::SH,
        Vr::ST,
        Vr::TM,
        Vr::UI,
        Vr::UL,
        Vr::US,
        Vr::SS,
        Vr::SL,
        Vr::FL,
        Vr::FD,
        Vr::OB,
        Vr::OW,
        Vr::SQ,
        Vr::UN,
    ];

    pub fn from_bytes(bytes: [u8; 2]) -> Option<Vr> {
        Vr::ALL.iter().copied().find(|vr| vr.as_bytes() == bytes)
    }

    pub fn as_bytes(self) -> [u8; 2] {
        let s = self.as_str().as_bytes();
        [s[0], s[1]]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Vr::AE => "AE",
            Vr::AS => "AS",
            Vr::CS => "CS",
            Vr::DA => "DA",
            Vr::DS => "DS",
            Vr::DT => "DT",
            Vr::IS => "IS",
            Vr::LO => "LO",
            Vr::LT => "LT",
            Vr::PN => "PN",
            Vr::SH => "SH",
            Vr::ST => "ST",
            Vr::TM => "TM",
            Vr::UI => "UI",
            Vr::UL => "UL",
            Vr::US => "US",
            Vr::SS => "SS",
            Vr::SL => "SL",
            Vr::FL => "FL",
            Vr::FD => "FD",
            Vr::OB => "OB",
            Vr::OW => "OW",
            Vr::SQ => "SQ",
            Vr::UN => "UN",
        }
    }

    /// Explicit VR encodings of these use two reserved bytes and a 32-bit length.
    pub fn has_long_length(self) -> bool {
        matches!(self, Vr::OB | Vr::OW | Vr::SQ | Vr::UN)
    }

    pub fn is_text(self) -> bool {
        matches!(
            self,
            Vr::AE
                | Vr::AS
                | Vr::CS
                | Vr::DA
                | Vr::DS
                | Vr::DT
                | Vr::IS
                | Vr::LO
                | Vr::LT
                | Vr::PN
                | Vr::SH
                | Vr::ST
                | Vr::TM
                | Vr::UI
        )
    }

    /// Byte used to pad values to even length.
    pub fn pad_byte(self) -> u8 {
        if self.is_text() && self != Vr::UI {
            b' '
        } else {
            0
        }
    }

    /// Size of one binary value, for fixed-width numeric VRs.
    pub fn numeric_width(self) -> Option<usize> {
        match self {
            Vr::US | Vr::SS => Some(2),
            Vr::UL | Vr::SL | Vr::FL => Some(4),
            Vr::FD => Some(8),
            _ => None,
        }
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
