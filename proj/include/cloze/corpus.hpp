#pragma once

// Corpus ingestion (line-delimited JSON records), final-answer extraction
// and normalization, and the template engine behind synthetic problem
// generation and name/noun/number perturbation.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cloze/eqspan.hpp"

namespace cloze {

struct ProblemRecord {
    std::string id;
    std::string question;
    std::string solution;  // step-by-step rationale; synthetic solutions end with a "#### <answer>" line
    std::string answer;    // canonical final answer
};

struct CorpusMeta {
    CorpusStyle style = CorpusStyle::synthetic;
    size_t count = 0;
    std::string source_path;
};

struct LoadResult {
    std::vector<ProblemRecord> records;
    CorpusMeta meta;
    size_t skipped = 0;                     // records dropped for missing answer markers
    std::vector<std::string> skip_reasons;  // one line per skipped record
};

// Input lines need `question` plus `answer` (gsm8k convention: rationale and
// final answer share the `answer` field, split at the last `####`) or the
// explicit four-field form. Malformed lines raise DataError naming the line.
LoadResult load_corpus(const std::string& path, CorpusStyle style);

// Output corpora always carry the four explicit fields.
void save_corpus(const std::string& path, const std::vector<ProblemRecord>& records);

// gsm8k styles: normalized numeric run after the LAST `####` (commas and
// surrounding whitespace stripped, trailing period dropped). math_latex:
// brace-balanced content of the LAST `\boxed{...}`. Absent when no marker.
std::optional<std::string> extract_final_answer(std::string_view text, CorpusStyle style);

// Strips thousands separators, leading '+', trailing '.'; canonicalizes
// through exact rationals when the string parses as one.
std::string normalize_answer(std::string_view s);

// ---------------------------------------------------------------------------
// synthetic templates
// ---------------------------------------------------------------------------

struct NumField {
    std::string name;  // placeholder, e.g. "num0"
    long long lo = 0;
    long long hi = 0;  // inclusive
};

// A problem template. Question and solution text may contain {name_i},
// {noun_i}, numeric {n_i} and derived-value placeholders {v_i}. Derived values are
// evaluated in order; every derived value and the final answer must come out
// a positive integer or the sampled assignment is rejected. The engine
// appends the final "#### <answer>" line to the solution.
struct TemplateDef {
    std::string id;
    std::string question;
    std::string solution;
    int name_count = 0;
    int noun_count = 0;
    std::vector<NumField> nums;
    std::vector<std::pair<std::string, std::string>> derived;  // (var, expression), ordered
    std::string answer;                                        // variable or expression
    std::map<std::string, std::string> defaults;               // identity assignment
};

using TemplateBank = std::vector<TemplateDef>;

// Hand-authored bank covering +, -, *, / chains of 2-4 annotated steps.
const TemplateBank& builtin_templates();

TemplateBank load_template_bank(const std::string& path);
void save_template_bank(const std::string& path, const TemplateBank& bank);

// Fixed pools so perturbation is self-contained.
const std::vector<std::string>& name_pool();
const std::vector<std::string>& noun_pool();  // plural forms

struct Assignment {
    std::vector<std::string> names;
    std::vector<std::string> nouns;
    std::map<std::string, long long> nums;

    bool operator<(const Assignment& o) const {
        if (names != o.names) return names < o.names;
        if (nouns != o.nouns) return nouns < o.nouns;
        return nums < o.nums;
    }
};

// Instantiates a template under an assignment. Throws DataError when a
// derived value or the answer fails the positive-integer constraint.
ProblemRecord instantiate_template(const TemplateDef& tpl, const Assignment& a, const std::string& record_id);

// The template's identity assignment (from `defaults`).
Assignment default_assignment(const TemplateDef& tpl);

// Deterministic generation: identical (bank, n, seed) give byte-identical
// corpora. A template that cannot satisfy its constraints within 1000
// sampled assignments raises DataError naming it.
std::vector<ProblemRecord> generate_synthetic(const TemplateBank& bank, size_t n, uint64_t seed);

// Like generate_synthetic but additionally guarantees no two emitted records
// share a full assignment for the same template.
std::vector<ProblemRecord> perturb_dataset(const TemplateBank& bank, size_t n, uint64_t seed);

}  // namespace cloze
