#pragma once

// Interactive-prompt construction for stage-2 caption training: lexicon
// noun extraction, filtering against the rough caption, the three-line
// Reference / Prompt / Prediction template and the padding-dropout rule.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gapbridge/errors.hpp"
#include "gapbridge/rng.hpp"

namespace gapbridge {

inline constexpr std::string_view kPaddingPrompt = "<PAD-PROMPT>";
inline constexpr std::string_view kNothingNew = "nothing new";

using Tokens = std::vector<std::string>;

/// Lowercase (ASCII), split on whitespace, strip ASCII punctuation from both
/// ends of each token, drop empties.
inline Tokens tokenize_caption(std::string_view text) {
  Tokens out;
  std::string current;
  auto flush = [&] {
    std::size_t b = 0, e = current.size();
    auto punct = [](char c) {
      const auto u = static_cast<unsigned char>(c);
      return u < 0x80 && std::ispunct(u);
    };
    while (b < e && punct(current[b])) ++b;
    while (e > b && punct(current[e - 1])) --e;
    if (e > b) out.emplace_back(current.substr(b, e - b));
    current.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

/// Set of lowercase, single-spaced noun phrases.
class NounLexicon {
 public:
  explicit NounLexicon(const std::vector<std::string>& phrases) {
    for (const auto& p : phrases) {
      Tokens t = tokenize_caption(p);
      if (t.empty()) continue;
      longest_ = std::max(longest_, t.size());
      entries_.insert(join_tokens(t));
    }
    if (entries_.empty()) throw ValidationError("noun lexicon is empty");
  }

  /// One phrase per line; text after '#' is a comment.
  static NounLexicon load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon " + path.string());
    std::vector<std::string> phrases;
    std::string line;
    while (std::getline(in, line)) {
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      phrases.push_back(line);
    }
    return NounLexicon(phrases);
  }

  bool contains(const std::string& phrase) const { return entries_.count(phrase) != 0; }
  std::size_t longest() const noexcept { return longest_; }
  const std::set<std::string>& entries() const noexcept { return entries_; }

 private:
  std::set<std::string> entries_;
  std::size_t longest_ = 0;
};

/// Lexicon phrases found in the caption, longest match first at each
/// position, non-overlapping, deduplicated in order of first occurrence.
inline std::vector<std::string> extract_candidates(std::string_view gt, const NounLexicon& lexicon) {
  const Tokens tokens = tokenize_caption(gt);
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::size_t matched = 0;
    for (std::size_t len = std::min(lexicon.longest(), tokens.size() - i); len >= 1; --len) {
      const Tokens span(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                        tokens.begin() + static_cast<std::ptrdiff_t>(i + len));
      std::string phrase = join_tokens(span);
      if (lexicon.contains(phrase)) {
        if (std::find(out.begin(), out.end(), phrase) == out.end()) out.push_back(std::move(phrase));
        matched = len;
        break;
      }
    }
    i += matched ? matched : 1;
  }
  return out;
}

inline bool contains_sequence(const Tokens& haystack, const Tokens& needle) {
  if (needle.empty()) return true;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

/// Drops candidates that already occur in the rough caption.
inline std::vector<std::string> filter_candidates(const std::vector<std::string>& candidates,
                                                  std::string_view rough) {
  const Tokens rough_tokens = tokenize_caption(rough);
  std::vector<std::string> out;
  for (const auto& c : candidates)
    if (!contains_sequence(rough_tokens, tokenize_caption(c))) out.push_back(c);
  return out;
}

/// "a", "a and b", "a, b and c".
inline std::string join_phrases(const std::vector<std::string>& phrases) {
  if (phrases.empty()) return std::string(kNothingNew);
  std::string out = phrases.front();
  for (std::size_t i = 1; i < phrases.size(); ++i) {
    out += i + 1 == phrases.size() ? " and " : ", ";
    out += phrases[i];
  }
  return out;
}

inline std::string build_full_prompt(std::string_view reference, const std::vector<std::string>& phrases,
                                     std::string_view target) {
  std::string out = "Reference: ";
  out += reference;
  out += "\nPrompt: An image contains ";
  out += join_phrases(phrases);
  out += ".\nPrediction: ";
  out += target;
  return out;
}

struct PromptRecord {
  std::string reference;
  std::vector<std::string> candidates;
  std::vector<std::string> filtered;
  std::string target;
  std::string serialized;
  bool padded = false;
};

/**
 * Stage-2 prompt for one (rough, ground-truth) pair. The Bernoulli(p) draw
 * is always taken so the generator advances identically for every pair;
 * the prompt is replaced by padding if it fires or if the two captions
 * tokenize identically.
 */
inline PromptRecord stage2_prompt_or_padding(std::string_view rough, std::string_view gt,
                                             const NounLexicon& lexicon, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("padding probability must lie in [0, 1]");
  PromptRecord r;
  r.reference = std::string(rough);
  r.target = std::string(gt);
  r.candidates = extract_candidates(gt, lexicon);
  r.filtered = filter_candidates(r.candidates, rough);
  const bool dropped = rng.bernoulli(p);
  r.padded = dropped || tokenize_caption(rough) == tokenize_caption(gt);
  r.serialized = r.padded ? std::string(kPaddingPrompt) : build_full_prompt(rough, r.filtered, gt);
  return r;
}

}  // namespace gapbridge
