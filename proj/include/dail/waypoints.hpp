#pragma once

// Waypoint extraction from expert solution text. Four pattern classes are
// scanned longest-match, non-overlapping, left to right; equal-length ties
// resolve in the order number > exponential > linear > coefficient. The
// regexes below are normative and repeated verbatim in the README.

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "dail/common.hpp"

namespace dail {

enum class WaypointKind { number, exponential, coefficient, linear };

inline const char* waypoint_kind_name(WaypointKind k) {
  switch (k) {
    case WaypointKind::number: return "number";
    case WaypointKind::exponential: return "exponential";
    case WaypointKind::coefficient: return "coefficient";
    case WaypointKind::linear: return "linear";
  }
  return "?";
}

struct Waypoint {
  std::string text;
  WaypointKind kind;
  bool operator==(const Waypoint& o) const { return text == o.text && kind == o.kind; }
};

enum class WaypointMode { full, numeric_only };

struct PartialSolution {
  std::optional<std::string> answer;  // absent for proof-domain instances
  std::vector<Waypoint> waypoints;    // document order, deduplicated, answer removed
};

struct AnswerExtraction {
  std::optional<std::string> answer;
  bool unbalanced = false;  // last \boxed{ had no matching close
};

// Last \boxed{...} in the text, brace-balanced so nested braces survive.
inline AnswerExtraction extract_final_answer(const std::string& text) {
  static const std::string kMarker = "\\boxed{";
  size_t at = text.rfind(kMarker);
  if (at == std::string::npos) return {};
  size_t pos = at + kMarker.size();
  int depth = 1;
  std::string content;
  while (pos < text.size()) {
    char c = text[pos++];
    if (c == '{') ++depth;
    if (c == '}') {
      --depth;
      if (depth == 0) return {content, false};
    }
    content.push_back(c);
  }
  return {std::nullopt, true};
}

// Trimmed exact match, with a numeric fallback so different renderings of the
// same value ("014", "+14", "14.0") compare equal. No symbolic evaluation.
inline bool answers_equivalent(const std::string& a, const std::string& b) {
  const std::string ta = trim(a), tb = trim(b);
  if (ta.empty() || tb.empty()) return false;
  if (ta == tb) return true;
  auto parse = [](const std::string& s, long double& out) {
    errno = 0;
    char* end = nullptr;
    out = std::strtold(s.c_str(), &end);
    return end == s.c_str() + s.size() && errno == 0 && std::isfinite(double(out));
  };
  long double x = 0, y = 0;
  return parse(ta, x) && parse(tb, y) && x == y;
}

namespace detail {

struct WaypointPattern {
  WaypointKind kind;
  std::regex re;
};

inline const std::vector<WaypointPattern>& waypoint_patterns() {
  // Order is the tie-break priority for equal-length matches.
  static const std::vector<WaypointPattern> patterns = {
      {WaypointKind::number,
       std::regex(R"(\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)")},
      {WaypointKind::exponential,
       std::regex(R"([A-Za-z0-9]+\^(?:\{[^{}]*\}|[A-Za-z0-9]+))")},
      {WaypointKind::linear,
       std::regex(R"(\d*[A-Za-z]+\s*[+-]\s*\d+)")},
      {WaypointKind::coefficient,
       std::regex(R"(\d+[A-Za-z]+)")},
  };
  return patterns;
}

}  // namespace detail

inline std::vector<Waypoint> extract_waypoints(const std::string& text,
                                               WaypointMode mode) {
  const auto& patterns = detail::waypoint_patterns();
  std::vector<Waypoint> found;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t best_len = 0;
    WaypointKind best_kind = WaypointKind::number;
    for (const auto& p : patterns) {
      if (mode == WaypointMode::numeric_only && p.kind != WaypointKind::number)
        continue;
      std::cmatch m;
      if (std::regex_search(text.c_str() + pos, text.c_str() + text.size(), m,
                            p.re, std::regex_constants::match_continuous)) {
        size_t len = static_cast<size_t>(m.length(0));
        if (len > best_len) {  // first pattern wins ties by construction
          best_len = len;
          best_kind = p.kind;
        }
      }
    }
    if (best_len == 0) {
      ++pos;
      continue;
    }
    found.push_back({text.substr(pos, best_len), best_kind});
    pos += best_len;
  }
  // Exact-string dedup keeping first occurrence (document order).
  std::vector<Waypoint> out;
  for (auto& w : found) {
    bool dup = false;
    for (const auto& kept : out)
      if (kept.text == w.text) { dup = true; break; }
    if (!dup) out.push_back(std::move(w));
  }
  return out;
}

enum class Domain { verifiable, proof };

inline const char* domain_name(Domain d) {
  return d == Domain::verifiable ? "verifiable" : "proof";
}

inline Domain parse_domain(const std::string& s) {
  if (s == "verifiable") return Domain::verifiable;
  if (s == "proof") return Domain::proof;
  throw std::invalid_argument("unknown domain: " + s + " (want verifiable|proof)");
}

// Waypoint-only compression of an expert solution: numbers only for
// verifiable problems, all four classes for proofs; the final answer is
// extracted, removed from the waypoint set, and dropped entirely for proofs.
inline PartialSolution make_partial_solution(const std::string& solution_text,
                                             Domain domain) {
  PartialSolution out;
  AnswerExtraction ans = extract_final_answer(solution_text);
  WaypointMode mode = domain == Domain::verifiable ? WaypointMode::numeric_only
                                                   : WaypointMode::full;
  out.waypoints = extract_waypoints(solution_text, mode);
  if (ans.answer) {
    std::erase_if(out.waypoints,
                  [&](const Waypoint& w) { return w.text == *ans.answer; });
  }
  if (domain == Domain::verifiable) out.answer = ans.answer;
  return out;
}

}  // namespace dail
