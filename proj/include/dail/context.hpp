#pragma once

// Role-context construction. The three role prompts (student, privileged
// student, negative reference) plus the answer-hint prompt are external text
// assets with {placeholder} slots; rendering is pure substitution except that
// a sentence whose placeholder value is absent (no answer for proofs, empty
// waypoint set) is dropped whole.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dail/common.hpp"
#include "dail/vocab.hpp"
#include "dail/waypoints.hpp"

namespace dail {

struct ProblemInstance {
  std::string id;
  std::string text;
  std::optional<std::string> answer;
  Domain domain = Domain::verifiable;
  int difficulty = 0;
};

struct ExpertSolution {
  std::string problem_id;
  std::string text;
};

enum class Role { student, privileged, negative, star_hint };

struct RoleContext {
  Role role = Role::student;
  std::string rendered_text;
  std::vector<TokenId> tokens;  // always encode(rendered_text)
};

namespace detail {

struct PlaceholderSpan {
  size_t begin, end;  // [begin, end) including braces
  std::string name;
};

inline std::vector<PlaceholderSpan> find_placeholders(const std::string& text) {
  std::vector<PlaceholderSpan> out;
  size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    size_t close = text.find('}', pos + 1);
    if (close == std::string::npos) break;
    std::string name = text.substr(pos + 1, close - pos - 1);
    bool ident = !name.empty();
    for (char c : name)
      if (!(std::islower(static_cast<unsigned char>(c)) || c == '_')) ident = false;
    if (ident) {
      out.push_back({pos, close + 1, name});
      pos = close + 1;
    } else {
      ++pos;
    }
  }
  return out;
}

// Enclosing sentence of a placeholder, bounded by the previous sentence end
// (or line start) and the next '.'. Exactly one separating space is absorbed
// into the span: the trailing one when the sentence continues on the same
// line, otherwise the leading ones, so neighbours stay byte-exact.
inline std::pair<size_t, size_t> sentence_span(const std::string& text,
                                               size_t from, size_t to) {
  size_t boundary = from;
  while (boundary > 0) {
    char c = text[boundary - 1];
    if (c == '\n' || c == '.') break;
    --boundary;
  }
  size_t content_start = boundary;
  while (content_start < from && text[content_start] == ' ') ++content_start;
  size_t end = to;
  while (end < text.size() && text[end] != '.' && text[end] != '\n') ++end;
  if (end < text.size() && text[end] == '.') ++end;
  if (end < text.size() && text[end] == ' ') return {content_start, end + 1};
  return {boundary, end};
}

inline std::string drop_absent_sentences(const std::string& tmpl,
                                         const std::set<std::string>& absent) {
  std::string out = tmpl;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& ph : find_placeholders(out)) {
      if (!absent.count(ph.name)) continue;
      auto [s, e] = sentence_span(out, ph.begin, ph.end);
      out.erase(s, e - s);
      changed = true;
      break;
    }
  }
  return out;
}

inline std::string substitute(
    const std::string& tmpl,
    const std::map<std::string, std::string>& values) {
  std::string out;
  size_t pos = 0;
  for (const auto& ph : find_placeholders(tmpl)) {
    out.append(tmpl, pos, ph.begin - pos);
    auto it = values.find(ph.name);
    if (it == values.end())
      throw std::invalid_argument("unknown placeholder in template: {" +
                                  ph.name + "}");
    out += it->second;
    pos = ph.end;
  }
  out.append(tmpl, pos, std::string::npos);
  return out;
}

}  // namespace detail

// values: present -> substituted; absent (nullopt) -> enclosing sentence
// dropped. A placeholder missing from the map entirely is an error.
inline std::string render_role_template(
    const std::string& tmpl,
    const std::map<std::string, std::optional<std::string>>& values) {
  std::set<std::string> absent;
  std::map<std::string, std::string> present;
  for (const auto& [k, v] : values) {
    if (v) present[k] = *v;
    else absent.insert(k);
  }
  return detail::substitute(detail::drop_absent_sentences(tmpl, absent), present);
}

struct TemplateSet {
  std::string student;
  std::string privileged;
  std::string negative;
  std::string star_hint;

  static TemplateSet load(const std::string& dir) {
    TemplateSet t;
    t.student = read_text_file(dir + "/student.txt");
    t.privileged = read_text_file(dir + "/privileged.txt");
    t.negative = read_text_file(dir + "/negative.txt");
    t.star_hint = read_text_file(dir + "/star_hint.txt");
    t.validate();
    return t;
  }

  void validate() const {
    auto require = [](const std::string& tmpl, const std::string& name,
                      const std::vector<std::string>& slots) {
      for (const auto& slot : slots)
        if (tmpl.find("{" + slot + "}") == std::string::npos)
          throw std::runtime_error("template " + name + " missing {" + slot + "}");
    };
    require(student, "student", {"problem"});
    require(privileged, "privileged", {"problem", "solution"});
    require(negative, "negative", {"problem", "answer", "waypoints"});
    require(star_hint, "star_hint", {"problem", "answer"});
  }

  // Literal chunks of every template under every realizable sentence-drop,
  // registered as single vocabulary symbols.
  std::vector<std::string> vocabulary_segments() const {
    std::vector<std::string> segs;
    auto add_chunks = [&](const std::string& tmpl) {
      size_t pos = 0;
      for (const auto& ph : detail::find_placeholders(tmpl)) {
        if (ph.begin > pos) segs.push_back(tmpl.substr(pos, ph.begin - pos));
        pos = ph.end;
      }
      if (pos < tmpl.size()) segs.push_back(tmpl.substr(pos));
    };
    add_chunks(student);
    add_chunks(privileged);
    add_chunks(star_hint);
    using Mask = std::set<std::string>;
    for (const Mask& mask :
         {Mask{}, Mask{"answer"}, Mask{"waypoints"}, Mask{"answer", "waypoints"}})
      add_chunks(detail::drop_absent_sentences(negative, mask));
    return segs;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64(student);
    h = fnv1a64(privileged, h);
    h = fnv1a64(negative, h);
    h = fnv1a64(star_hint, h);
    return h;
  }
};

inline RoleContext build_student_context(const ProblemInstance& p,
                                         const TemplateSet& templates,
                                         const Vocabulary& vocab) {
  RoleContext ctx;
  ctx.role = Role::student;
  ctx.rendered_text = render_role_template(templates.student, {{"problem", p.text}});
  ctx.tokens = vocab.encode(ctx.rendered_text);
  return ctx;
}

inline RoleContext build_privileged_context(
    const ProblemInstance& p, const std::vector<ExpertSolution>& solutions,
    const TemplateSet& templates, const Vocabulary& vocab) {
  if (solutions.empty())
    throw std::invalid_argument("privileged context needs at least one solution");
  std::string joined;
  for (size_t i = 0; i < solutions.size(); ++i) {
    if (i) joined += "\n\n";
    joined += solutions[i].text;
  }
  RoleContext ctx;
  ctx.role = Role::privileged;
  ctx.rendered_text = render_role_template(
      templates.privileged, {{"problem", p.text}, {"solution", joined}});
  ctx.tokens = vocab.encode(ctx.rendered_text);
  return ctx;
}

inline RoleContext build_negative_context(const ProblemInstance& p,
                                          const PartialSolution& partial,
                                          const TemplateSet& templates,
                                          const Vocabulary& vocab) {
  std::optional<std::string> waypoints;
  if (!partial.waypoints.empty()) {
    std::string joined;
    for (size_t i = 0; i < partial.waypoints.size(); ++i) {
      if (i) joined += ", ";
      joined += partial.waypoints[i].text;
    }
    waypoints = joined;
  }
  RoleContext ctx;
  ctx.role = Role::negative;
  ctx.rendered_text = render_role_template(
      templates.negative, {{"problem", p.text},
                           {"answer", partial.answer},
                           {"waypoints", waypoints}});
  ctx.tokens = vocab.encode(ctx.rendered_text);
  return ctx;
}

inline RoleContext build_star_hint_context(const ProblemInstance& p,
                                           const TemplateSet& templates,
                                           const Vocabulary& vocab) {
  if (!p.answer)
    throw std::invalid_argument("answer-hint context needs a known answer: " + p.id);
  RoleContext ctx;
  ctx.role = Role::star_hint;
  ctx.rendered_text = render_role_template(
      templates.star_hint, {{"problem", p.text}, {"answer", p.answer}});
  ctx.tokens = vocab.encode(ctx.rendered_text);
  return ctx;
}

}  // namespace dail
