//! Hindi number words. 0–9999 are read as cardinals, longer digit strings
//! (and strings with a leading zero) digit by digit.

const UNITS: [&str; 100] = [
    "शून्य", "एक", "दो", "तीन", "चार", "पाँच", "छह", "सात", "आठ", "नौ",
    "दस", "ग्यारह", "बारह", "तेरह", "चौदह", "पंद्रह", "सोलह", "सत्रह", "अठारह", "उन्नीस",
    "बीस", "इक्कीस", "बाईस", "तेईस", "चौबीस", "पच्चीस", "छब्बीस", "सत्ताईस", "अट्ठाईस", "उनतीस",
    "तीस", "इकतीस", "बत्तीस", "तैंतीस", "चौंतीस", "पैंतीस", "छत्तीस", "सैंतीस", "अड़तीस", "उनतालीस",
    "चालीस", "इकतालीस", "बयालीस", "तैंतालीस", "चवालीस", "पैंतालीस", "छियालीस", "सैंतालीस", "अड़तालीस", "उनचास",
    "पचास", "इक्यावन", "बावन", "तिरपन", "चौवन", "पचपन", "छप्पन", "सत्तावन", "अट्ठावन", "उनसठ",
    "साठ", "इकसठ", "बासठ", "तिरसठ", "चौंसठ", "पैंसठ", "छियासठ", "सड़सठ", "अड़सठ", "उनहत्तर",
    "सत्तर", "इकहत्तर", "बहत्तर", "तिहत्तर", "चौहत्तर", "पचहत्तर", "छिहत्तर", "सतहत्तर", "अठहत्तर", "उन्यासी",
    "अस्सी", "इक्यासी", "बयासी", "तिरासी", "चौरासी", "पचासी", "छियासी", "सत्तासी", "अट्ठासी", "नवासी",
    "नब्बे", "इक्यानवे", "बानवे", "तिरानवे", "चौरानवे", "पचानवे", "छियानवे", "सत्तानवे", "अट्ठानवे", "निन्यानवे",
];

const HUNDRED: &str = "सौ";
const THOUSAND: &str = "हज़ार";

/// Value of an ASCII or Devanagari digit.
pub fn digit_value(c: char) -> Option<u32> {
    match c {
        '0'..='9' => Some(c as u32 - '0' as u32),
        '\u{0966}'..='\u{096F}' => Some(c as u32 - 0x0966),
        _ => None,
    }
}

pub fn is_digit(c: char) -> bool {
    digit_value(c).is_some()
}

/// Cardinal reading of `n` for `n ≤ 9999`.
pub fn cardinal(n: u32) -> String {
    assert!(n <= 9999, "cardinal reading only covers 0..=9999");
    if n < 100 {
        return UNITS[n as usize].to_string();
    }
    let mut words = Vec::new();
    let thousands = n / 1000;
    let hundreds = (n / 100) % 10;
    let rest = n % 100;
    if thousands > 0 {
        words.push(UNITS[thousands as usize]);
        words.push(THOUSAND);
    }
    if hundreds > 0 {
        words.push(UNITS[hundreds as usize]);
        words.push(HUNDRED);
    }
    if rest > 0 {
        words.push(UNITS[rest as usize]);
    }
    words.join(" ")
}

/// Reads a run of digits (ASCII or Devanagari).
pub fn expand_digits(run: &str) -> String {
    let digits: Vec<u32> = run.chars().filter_map(digit_value).collect();
    debug_assert_eq!(digits.len(), run.chars().count(), "non-digit in run");
    let cardinal_ok = digits.len() <= 4 && (digits.len() == 1 || digits[0] != 0);
    if cardinal_ok {
        let n = digits.iter().fold(0, |acc, d| acc * 10 + d);
        cardinal(n)
    } else {
        digits
            .iter()
            .map(|&d| UNITS[d as usize])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_numbers() {
        assert_eq!(cardinal(0), "शून्य");
        assert_eq!(cardinal(42), "बयालीस");
        assert_eq!(cardinal(99), "निन्यानवे");
    }

    #[test]
    fn compound_numbers() {
        assert_eq!(cardinal(100), "एक सौ");
        assert_eq!(cardinal(1234), "एक हज़ार दो सौ चौंतीस");
        assert_eq!(cardinal(9999), "नौ हज़ार नौ सौ निन्यानवे");
        assert_eq!(cardinal(2005), "दो हज़ार पाँच");
    }

    #[test]
    fn long_and_zero_led_runs_read_digitwise() {
        assert_eq!(expand_digits("12345"), "एक दो तीन चार पाँच");
        assert_eq!(expand_digits("007"), "शून्य शून्य सात");
        assert_eq!(expand_digits("४२"), "बयालीस");
    }

    #[test]
    fn every_word_is_devanagari() {
        for w in UNITS.iter().chain([HUNDRED, THOUSAND].iter()) {
            assert!(
                w.chars().all(|c| ('\u{0900}'..='\u{097F}').contains(&c)),
                "{w}"
            );
        }
    }
}
