#include "cloze/corpus.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cloze/common.hpp"

namespace cloze {

using nlohmann::json;

// ---------------------------------------------------------------------------
// answer extraction / normalization
// ---------------------------------------------------------------------------

namespace {

std::optional<std::string> extract_after_hashes(std::string_view text) {
    size_t pos = text.rfind("####");
    if (pos == std::string_view::npos) return std::nullopt;
    size_t i = pos + 4;
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    size_t start = i;
    if (i < text.size() && text[i] == '-') ++i;
    size_t digits = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c >= '0' && c <= '9') {
            ++digits;
            ++i;
        } else if (c == ',' || c == '.') {
            ++i;
        } else {
            break;
        }
    }
    if (digits == 0) return std::nullopt;
    std::string out;
    for (char c : text.substr(start, i - start)) {
        if (c != ',') out.push_back(c);
    }
    while (!out.empty() && out.back() == '.') out.pop_back();
    if (out.empty() || out == "-") return std::nullopt;
    return out;
}

std::optional<std::string> extract_boxed(std::string_view text) {
    const std::string_view marker = "\\boxed{";
    size_t pos = text.rfind(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    size_t i = pos + marker.size();
    int depth = 1;
    size_t start = i;
    while (i < text.size()) {
        if (text[i] == '{') {
            ++depth;
        } else if (text[i] == '}') {
            --depth;
            if (depth == 0) return std::string(text.substr(start, i - start));
        }
        ++i;
    }
    return std::nullopt;  // unbalanced
}

}  // namespace

std::optional<std::string> extract_final_answer(std::string_view text, CorpusStyle style) {
    if (style == CorpusStyle::math_latex) return extract_boxed(text);
    return extract_after_hashes(text);
}

std::string normalize_answer(std::string_view s) {
    std::string t = trim(s);
    std::string cleaned;
    cleaned.reserve(t.size());
    for (char c : t) {
        if (c == ',') continue;
        cleaned.push_back(c);
    }
    if (!cleaned.empty() && cleaned.front() == '+') cleaned.erase(cleaned.begin());
    if (!cleaned.empty() && cleaned.back() == '.') cleaned.pop_back();
    Rational r;
    if (Rational::try_parse(cleaned, r)) return r.to_string();
    return cleaned;
}

// ---------------------------------------------------------------------------
// corpus files
// ---------------------------------------------------------------------------

namespace {

json parse_line(const std::string& path, size_t lineno, const std::string& line) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed line: " + e.what());
    }
}

std::string require_string(const json& j, const char* key, const std::string& path, size_t lineno) {
    if (!j.contains(key) || !j[key].is_string()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed line: missing string field '" +
                        key + "'");
    }
    return j[key].get<std::string>();
}

}  // namespace

LoadResult load_corpus(const std::string& path, CorpusStyle style) {
    LoadResult result;
    result.meta.style = style;
    result.meta.source_path = path;

    const std::string content = read_file(path);
    std::set<std::string> seen_ids;
    size_t lineno = 0;
    for (const std::string& line : split_lines(content)) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j = parse_line(path, lineno, line);

        ProblemRecord rec;
        rec.id = (j.contains("id") && j["id"].is_string()) ? j["id"].get<std::string>()
                                                           : "rec-" + std::to_string(lineno);
        rec.question = require_string(j, "question", path, lineno);

        if (style == CorpusStyle::gsm8k_annotated) {
            // GSM8K convention: rationale and final answer share one field.
            std::string composite = require_string(j, "answer", path, lineno);
            size_t pos = composite.rfind("####");
            auto extracted = extract_after_hashes(composite);
            if (pos == std::string::npos || !extracted) {
                ++result.skipped;
                result.skip_reasons.push_back("line " + std::to_string(lineno) + ": no #### answer marker");
                continue;
            }
            std::string before = composite.substr(0, pos);
            while (!before.empty() && (before.back() == '\n' || before.back() == '\r')) before.pop_back();
            rec.solution = before;
            rec.answer = normalize_answer(*extracted);
        } else if (style == CorpusStyle::math_latex) {
            rec.solution = j.contains("solution") ? require_string(j, "solution", path, lineno)
                                                  : require_string(j, "answer", path, lineno);
            auto boxed = extract_boxed(rec.solution);
            if (!boxed) {
                ++result.skipped;
                result.skip_reasons.push_back("line " + std::to_string(lineno) + ": no \\boxed{} marker");
                continue;
            }
            rec.answer = j.contains("answer") && j["answer"].is_string() && !j["answer"].get<std::string>().empty()
                             ? j["answer"].get<std::string>()
                             : *boxed;
        } else {
            rec.solution = require_string(j, "solution", path, lineno);
            rec.answer = require_string(j, "answer", path, lineno);
        }

        if (rec.answer.empty()) {
            ++result.skipped;
            result.skip_reasons.push_back("line " + std::to_string(lineno) + ": empty answer");
            continue;
        }
        if (style != CorpusStyle::math_latex) {
            Rational r;
            if (!Rational::try_parse(normalize_answer(rec.answer), r)) {
                ++result.skipped;
                result.skip_reasons.push_back("line " + std::to_string(lineno) + ": answer is not a rational: '" +
                                              rec.answer + "'");
                continue;
            }
        }
        if (!seen_ids.insert(rec.id).second) {
            throw DataError(path + ":" + std::to_string(lineno) + ": duplicate record id '" + rec.id + "'");
        }
        result.records.push_back(std::move(rec));
    }
    result.meta.count = result.records.size();
    return result;
}

void save_corpus(const std::string& path, const std::vector<ProblemRecord>& records) {
    std::ostringstream out;
    for (const auto& r : records) {
        json j;
        j["id"] = r.id;
        j["question"] = r.question;
        j["solution"] = r.solution;
        j["answer"] = r.answer;
        out << j.dump() << "\n";
    }
    write_file(path, out.str());
}

// ---------------------------------------------------------------------------
// template engine
// ---------------------------------------------------------------------------

const std::vector<std::string>& name_pool() {
    static const std::vector<std::string> pool = {
        "Ava",    "Ben",    "Caleb",  "Dana",   "Eli",    "Fiona",  "Gavin",  "Hana",   "Ivan",
        "Jade",   "Kiran",  "Liam",   "Mia",    "Noah",   "Olive",  "Priya",  "Quinn",  "Rosa",
        "Sam",    "Tara",   "Umar",   "Vera",   "Wes",    "Xena",   "Yusuf",  "Zoe",    "Arjun",
        "Bella",  "Carmen", "Derek",  "Elena",  "Felix",  "Greta",  "Hugo",   "Ines",   "Jonas",
        "Keiko",  "Lucas",  "Marta",  "Nina",   "Oscar",  "Paulo",  "Rita",   "Selma",  "Tomas",
        "Ursula", "Viktor", "Wanda",  "Yara",   "Zane",   "Amara",  "Bruno",  "Clara",  "Diego"};
    return pool;
}

const std::vector<std::string>& noun_pool() {
    static const std::vector<std::string> pool = {
        "apples",   "marbles",  "stickers", "pencils",  "books",    "coins",   "shells",  "ribbons",
        "oranges",  "tomatoes", "cookies",  "buttons",  "stamps",   "cards",   "beads",   "crayons",
        "eggs",     "peaches",  "balloons", "muffins",  "acorns",   "pebbles", "lemons",  "carrots",
        "feathers", "candles",  "plums",    "walnuts",  "cherries", "daisies", "bottles", "magnets"};
    return pool;
}

namespace {

TemplateDef make_template(std::string id, std::string question, std::string solution, int names, int nouns,
                          std::vector<NumField> nums,
                          std::vector<std::pair<std::string, std::string>> derived, std::string answer,
                          std::map<std::string, std::string> defaults) {
    TemplateDef t;
    t.id = std::move(id);
    t.question = std::move(question);
    t.solution = std::move(solution);
    t.name_count = names;
    t.noun_count = nouns;
    t.nums = std::move(nums);
    t.derived = std::move(derived);
    t.answer = std::move(answer);
    t.defaults = std::move(defaults);
    return t;
}

TemplateBank build_builtin_bank() {
    TemplateBank bank;

    bank.push_back(make_template(
        "pick_three_times",
        "{name0} picked {n0} {noun0} in the morning and {n1} in the afternoon. Then {name0} picked "
        "{n2} more. How many {noun0} did {name0} pick in all?",
        "The first two rounds give <<{n0}+{n1}={v0}>>{v0} {noun0}. Adding the last round gives "
        "<<{v0}+{n2}={v1}>>{v1} {noun0}.",
        1, 1, {{"n0", 2, 9}, {"n1", 2, 9}, {"n2", 2, 9}},
        {{"v0", "n0+n1"}, {"v1", "v0+n2"}}, "v1",
        {{"name0", "Mia"}, {"noun0", "apples"}, {"n0", "4"}, {"n1", "6"}, {"n2", "5"}}));

    bank.push_back(make_template(
        "boxes_then_sell",
        "{name0} has {n0} boxes with {n1} {noun0} in each box. {name0} sells {n2} {noun0}. How many "
        "{noun0} are left?",
        "The boxes hold <<{n0}*{n1}={v0}>>{v0} {noun0}. After the sale <<{v0}-{n2}={v1}>>{v1} "
        "{noun0} are left.",
        1, 1, {{"n0", 2, 5}, {"n1", 2, 5}, {"n2", 2, 9}},
        {{"v0", "n0*n1"}, {"v1", "v0-n2"}}, "v1",
        {{"name0", "Ben"}, {"noun0", "marbles"}, {"n0", "4"}, {"n1", "6"}, {"n2", "5"}}));

    bank.push_back(make_template(
        "groups_take_away",
        "A teacher splits {v0} {noun0} into {n0} equal groups and then takes {n2} from one group. How "
        "many {noun0} remain in that group?",
        "Each group has <<{v0}/{n0}={v1}>>{v1} {noun0}. Taking some away leaves <<{v1}-{n2}={v2}>>{v2} "
        "{noun0}.",
        0, 1, {{"n0", 2, 4}, {"n1", 3, 9}, {"n2", 2, 8}},
        {{"v0", "n0*n1"}, {"v1", "v0/n0"}, {"v2", "v1-n2"}}, "v2",
        {{"noun0", "pencils"}, {"n0", "3"}, {"n1", "8"}, {"n2", "2"}}));

    bank.push_back(make_template(
        "buy_together",
        "{name0} buys {n0} {noun0} and {name1} buys {n1} {noun0}. Each of the {noun0} costs {n2} "
        "dollars. How many dollars do they spend in total?",
        "Together they buy <<{n0}+{n1}={v0}>>{v0} {noun0}. The total cost is <<{v0}*{n2}={v1}>>{v1} "
        "dollars.",
        2, 1, {{"n0", 2, 9}, {"n1", 2, 9}, {"n2", 2, 4}},
        {{"v0", "n0+n1"}, {"v1", "v0*n2"}}, "v1",
        {{"name0", "Ava"}, {"name1", "Eli"}, {"noun0", "books"}, {"n0", "3"}, {"n1", "5"}, {"n2", "2"}}));

    bank.push_back(make_template(
        "twice_as_many",
        "{name0} has {n0} {noun0}. {name1} has twice as many. How many {noun0} do they have together?",
        "{name1} has <<2*{n0}={v0}>>{v0} {noun0}. Together they have <<{n0}+{v0}={v1}>>{v1} {noun0}.",
        2, 1, {{"n0", 2, 9}},
        {{"v0", "2*n0"}, {"v1", "n0+v0"}}, "v1",
        {{"name0", "Zoe"}, {"name1", "Sam"}, {"noun0", "coins"}, {"n0", "7"}}));

    bank.push_back(make_template(
        "triple_then_give",
        "{name0} collects {n0} {noun0} on Monday and {n1} on Tuesday. On Wednesday the collection "
        "triples. Then {name0} gives away {n2}. How many {noun0} are left?",
        "The first two days give <<{n0}+{n1}={v0}>>{v0} {noun0}. Tripling gives <<{v0}*3={v1}>>{v1} "
        "{noun0}. Giving some away leaves <<{v1}-{n2}={v2}>>{v2} {noun0}.",
        1, 1, {{"n0", 2, 6}, {"n1", 2, 6}, {"n2", 2, 9}},
        {{"v0", "n0+n1"}, {"v1", "v0*3"}, {"v2", "v1-n2"}}, "v2",
        {{"name0", "Rosa"}, {"noun0", "shells"}, {"n0", "3"}, {"n1", "4"}, {"n2", "6"}}));

    bank.push_back(make_template(
        "bags_earn",
        "{name0} has {v0} {noun0} and packs them into bags of {n0}. Each bag sells for {n2} dollars. "
        "How many dollars does {name0} earn?",
        "{name0} fills <<{v0}/{n0}={v1}>>{v1} bags. Selling them earns <<{v1}*{n2}={v2}>>{v2} dollars.",
        1, 1, {{"n0", 2, 4}, {"n1", 2, 6}, {"n2", 2, 5}},
        {{"v0", "n0*n1"}, {"v1", "v0/n0"}, {"v2", "v1*n2"}}, "v2",
        {{"name0", "Tara"}, {"noun0", "oranges"}, {"n0", "4"}, {"n1", "5"}, {"n2", "3"}}));

    bank.push_back(make_template(
        "fewer_points",
        "{name0} scored {n0} points and {name1} scored {n1} points fewer. How many points did they "
        "score together?",
        "{name1} scored <<{n0}-{n1}={v0}>>{v0} points. Together they scored <<{n0}+{v0}={v1}>>{v1} "
        "points.",
        2, 0, {{"n0", 10, 20}, {"n1", 2, 9}},
        {{"v0", "n0-n1"}, {"v1", "n0+v0"}}, "v1",
        {{"name0", "Noah"}, {"name1", "Jade"}, {"n0", "21"}, {"n1", "4"}}));

    bank.push_back(make_template(
        "give_half_find_more",
        "{name0} had {v0} {noun0} and gave half of them to {name1}. Then {name0} found {n1} more. How "
        "many {noun0} does {name0} have now?",
        "After giving half away, {name0} has <<{v0}/2={v1}>>{v1} {noun0}. Finding more gives "
        "<<{v1}+{n1}={v2}>>{v2} {noun0}.",
        2, 1, {{"n0", 2, 9}, {"n1", 2, 9}},
        {{"v0", "2*n0"}, {"v1", "v0/2"}, {"v2", "v1+n1"}}, "v2",
        {{"name0", "Ivan"}, {"name1", "Hana"}, {"noun0", "stickers"}, {"n0", "8"}, {"n1", "3"}}));

    bank.push_back(make_template(
        "three_colors_value",
        "On a farm there are {n0} red {noun0}, {n1} blue {noun0}, and {n2} green {noun0}. Each one "
        "is worth {n3} tokens. How many tokens are all of them worth?",
        "Red and blue give <<{n0}+{n1}={v0}>>{v0} {noun0}. Adding green gives <<{v0}+{n2}={v1}>>{v1} "
        "{noun0}. Their value is <<{v1}*{n3}={v2}>>{v2} tokens.",
        0, 1, {{"n0", 2, 6}, {"n1", 2, 6}, {"n2", 2, 6}, {"n3", 2, 3}},
        {{"v0", "n0+n1"}, {"v1", "v0+n2"}, {"v2", "v1*n3"}}, "v2",
        {{"noun0", "tomatoes"}, {"n0", "3"}, {"n1", "5"}, {"n2", "2"}, {"n3", "4"}}));

    bank.push_back(make_template(
        "pay_with_change",
        "{name0} buys {n0} {noun0} for {n1} dollars each and pays with {v0} dollars. How many dollars "
        "of change does {name0} get?",
        "The {noun0} cost <<{n0}*{n1}={v1}>>{v1} dollars. The change is <<{v0}-{v1}={v2}>>{v2} dollars.",
        1, 1, {{"n0", 2, 5}, {"n1", 2, 5}, {"n2", 2, 9}},
        {{"v0", "n0*n1+n2"}, {"v1", "n0*n1"}, {"v2", "v0-v1"}}, "v2",
        {{"name0", "Vera"}, {"noun0", "muffins"}, {"n0", "3"}, {"n1", "4"}, {"n2", "8"}}));

    bank.push_back(make_template(
        "equal_rows",
        "{name0} plants {v0} {noun0} in {n0} equal rows. {name1} plants {n2} more rows of the same "
        "size. How many {noun0} did {name1} plant?",
        "Each row has <<{v0}/{n0}={v1}>>{v1} {noun0}. So {name1} planted <<{n2}*{v1}={v2}>>{v2} "
        "{noun0}.",
        2, 1, {{"n0", 2, 4}, {"n1", 2, 6}, {"n2", 2, 4}},
        {{"v0", "n0*n1"}, {"v1", "v0/n0"}, {"v2", "n2*v1"}}, "v2",
        {{"name0", "Wes"}, {"name1", "Dana"}, {"noun0", "carrots"}, {"n0", "3"}, {"n1", "6"}, {"n2", "4"}}));

    bank.push_back(make_template(
        "older_in_years",
        "{name0} is {n0} years old. {name1} is {n1} years older than {name0}. How old will {name1} be "
        "in {n2} years?",
        "{name1} is <<{n0}+{n1}={v0}>>{v0} years old now. In {n2} years {name1} will be "
        "<<{v0}+{n2}={v1}>>{v1} years old.",
        2, 0, {{"n0", 5, 15}, {"n1", 2, 9}, {"n2", 2, 9}},
        {{"v0", "n0+n1"}, {"v1", "v0+n2"}}, "v1",
        {{"name0", "Umar"}, {"name1", "Fiona"}, {"n0", "12"}, {"n1", "9"}, {"n2", "3"}}));

    bank.push_back(make_template(
        "pages_left",
        "A book has {v0} pages. {name0} reads {n1} pages every day. After {n2} days, how many pages "
        "are left?",
        "{name0} reads <<{n1}*{n2}={v1}>>{v1} pages in total. The book still has <<{v0}-{v1}={v2}>>{v2} "
        "pages.",
        1, 0, {{"n1", 2, 5}, {"n2", 2, 5}, {"n3", 2, 9}},
        {{"v0", "n1*n2+n3"}, {"v1", "n1*n2"}, {"v2", "v0-v1"}}, "v2",
        {{"name0", "Liam"}, {"n1", "4"}, {"n2", "3"}, {"n3", "20"}}));

    bank.push_back(make_template(
        "lose_then_win",
        "{name0} starts with {n0} {noun0}, loses {n1} of them, and then wins {n2} more. How many "
        "{noun0} does {name0} have at the end?",
        "After losing some, {name0} has <<{n0}-{n1}={v0}>>{v0} {noun0}. After winning more, {name0} "
        "has <<{v0}+{n2}={v1}>>{v1} {noun0}.",
        1, 1, {{"n0", 10, 20}, {"n1", 2, 9}, {"n2", 2, 9}},
        {{"v0", "n0-n1"}, {"v1", "v0+n2"}}, "v1",
        {{"name0", "Priya"}, {"noun0", "buttons"}, {"n0", "35"}, {"n1", "6"}, {"n2", "9"}}));

    bank.push_back(make_template(
        "two_scorers",
        "In a game, {name0} scores {n0} goals worth {n1} points each, and {name1} scores {n2} goals "
        "worth {n3} points each. How many points do they score together?",
        "{name0} scores <<{n0}*{n1}={v0}>>{v0} points. {name1} scores <<{n2}*{n3}={v1}>>{v1} "
        "points. Together they score <<{v0}+{v1}={v2}>>{v2} points.",
        2, 0, {{"n0", 2, 5}, {"n1", 2, 5}, {"n2", 2, 5}, {"n3", 2, 5}},
        {{"v0", "n0*n1"}, {"v1", "n2*n3"}, {"v2", "v0+v1"}}, "v2",
        {{"name0", "Oscar"}, {"name1", "Nina"}, {"n0", "3"}, {"n1", "2"}, {"n2", "4"}, {"n3", "5"}}));

    bank.push_back(make_template(
        "split_into_jars",
        "{name0} and {name1} equally split {v0} {noun0}. {name1} then shares the half equally among "
        "{n1} jars. How many {noun0} go into each jar?",
        "Each person gets <<{v0}/2={v1}>>{v1} {noun0}. Each jar holds <<{v1}/{n1}={v2}>>{v2} {noun0}.",
        2, 1, {{"n1", 2, 4}, {"n2", 2, 6}},
        {{"v0", "2*n1*n2"}, {"v1", "v0/2"}, {"v2", "v1/n1"}}, "v2",
        {{"name0", "Greta"}, {"name1", "Hugo"}, {"noun0", "beads"}, {"n1", "3"}, {"n2", "7"}}));

    bank.push_back(make_template(
        "fence_boards",
        "A fence needs {n0} panels. Each panel uses {n1} boards. {name0} already has {n2} boards. "
        "How many more boards does {name0} need?",
        "The fence uses <<{n0}*{n1}={v0}>>{v0} boards. {name0} still needs <<{v0}-{n2}={v1}>>{v1} "
        "boards.",
        1, 0, {{"n0", 3, 6}, {"n1", 2, 5}, {"n2", 2, 5}},
        {{"v0", "n0*n1"}, {"v1", "v0-n2"}}, "v1",
        {{"name0", "Felix"}, {"n0", "5"}, {"n1", "4"}, {"n2", "3"}}));

    bank.push_back(make_template(
        "weekly_savings",
        "{name0} saves {n0} dollars each week for {n1} weeks, then spends {n2} dollars on {noun0}. "
        "How many dollars does {name0} have left?",
        "{name0} saves <<{n0}*{n1}={v0}>>{v0} dollars in total. After the purchase "
        "<<{v0}-{n2}={v1}>>{v1} dollars remain.",
        1, 1, {{"n0", 2, 6}, {"n1", 2, 6}, {"n2", 2, 3}},
        {{"v0", "n0*n1"}, {"v1", "v0-n2"}}, "v1",
        {{"name0", "Carmen"}, {"noun0", "cards"}, {"n0", "5"}, {"n1", "6"}, {"n2", "2"}}));

    bank.push_back(make_template(
        "daily_miles",
        "{name0} walks {n0} blocks in the morning and {n1} blocks in the afternoon, repeating this "
        "for {n2} days. How many blocks does {name0} walk in total?",
        "Each day covers <<{n0}+{n1}={v0}>>{v0} blocks. Over all the days that is "
        "<<{v0}*{n2}={v1}>>{v1} blocks.",
        1, 0, {{"n0", 2, 9}, {"n1", 2, 9}, {"n2", 2, 3}},
        {{"v0", "n0+n1"}, {"v1", "v0*n2"}}, "v1",
        {{"name0", "Keiko"}, {"n0", "6"}, {"n1", "9"}, {"n2", "3"}}));

    bank.push_back(make_template(
        "friends_buy_more",
        "{name0} splits {v0} {noun0} equally among {n1} friends, and each friend then buys {n2} more. "
        "How many {noun0} does each friend end up with?",
        "Each friend gets <<{v0}/{n1}={v1}>>{v1} {noun0}. Buying more gives <<{v1}+{n2}={v2}>>{v2} "
        "{noun0}.",
        1, 1, {{"n1", 2, 4}, {"n2", 2, 9}, {"n3", 2, 6}},
        {{"v0", "n1*n3"}, {"v1", "v0/n1"}, {"v2", "v1+n2"}}, "v2",
        {{"name0", "Diego"}, {"noun0", "crayons"}, {"n1", "4"}, {"n2", "3"}, {"n3", "6"}}));

    bank.push_back(make_template(
        "bake_sale",
        "{name0} bakes {n0} trays of {noun0} with {n1} on each tray. A friend brings {n2} more "
        "{noun0}, and together they sell {n3} of them. How many {noun0} are left?",
        "The trays hold <<{n0}*{n1}={v0}>>{v0} {noun0}. With the extra ones there are "
        "<<{v0}+{n2}={v1}>>{v1} {noun0}. After the sale <<{v1}-{n3}={v2}>>{v2} {noun0} remain.",
        1, 1, {{"n0", 2, 9}, {"n1", 2, 9}, {"n2", 2, 20}, {"n3", 2, 9}},
        {{"v0", "n0*n1"}, {"v1", "v0+n2"}, {"v2", "v1-n3"}}, "v2",
        {{"name0", "Selma"}, {"noun0", "cookies"}, {"n0", "3"}, {"n1", "6"}, {"n2", "4"}, {"n3", "7"}}));

    bank.push_back(make_template(
        "shared_ride_cost",
        "A trip costs {v0} dollars and {n0} friends split it equally. {name0} also pays a {n2} dollar "
        "fee. How many dollars does {name0} pay in total?",
        "Each friend pays <<{v0}/{n0}={v1}>>{v1} dollars. With the fee, {name0} pays "
        "<<{v1}+{n2}={v2}>>{v2} dollars.",
        1, 0, {{"n0", 2, 4}, {"n1", 3, 9}, {"n2", 2, 9}},
        {{"v0", "n0*n1"}, {"v1", "v0/n0"}, {"v2", "v1+n2"}}, "v2",
        {{"name0", "Bruno"}, {"n0", "4"}, {"n1", "9"}, {"n2", "5"}}));

    return bank;
}

}  // namespace

const TemplateBank& builtin_templates() {
    static const TemplateBank bank = build_builtin_bank();
    return bank;
}

// ---------------------------------------------------------------------------
// template bank files
// ---------------------------------------------------------------------------

TemplateBank load_template_bank(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw DataError(path + ": not valid JSON: " + e.what());
    }
    if (!j.is_array()) throw DataError(path + ": template bank must be a JSON array");
    TemplateBank bank;
    for (size_t i = 0; i < j.size(); ++i) {
        const json& t = j[i];
        const std::string at = path + ": templates[" + std::to_string(i) + "]";
        auto str = [&](const char* key) -> std::string {
            if (!t.contains(key) || !t[key].is_string()) throw DataError(at + "." + key + ": expected string");
            return t[key].get<std::string>();
        };
        TemplateDef d;
        d.id = str("id");
        d.question = str("question");
        d.solution = str("solution");
        d.answer = str("answer");
        d.name_count = t.value("names", 0);
        d.noun_count = t.value("nouns", 0);
        if (t.contains("nums")) {
            if (!t["nums"].is_array()) throw DataError(at + ".nums: expected array");
            for (size_t k = 0; k < t["nums"].size(); ++k) {
                const json& nf = t["nums"][k];
                const std::string nat = at + ".nums[" + std::to_string(k) + "]";
                if (!nf.contains("name") || !nf["name"].is_string()) throw DataError(nat + ".name: expected string");
                if (!nf.contains("lo") || !nf["lo"].is_number_integer()) throw DataError(nat + ".lo: expected integer");
                if (!nf.contains("hi") || !nf["hi"].is_number_integer()) throw DataError(nat + ".hi: expected integer");
                NumField f{nf["name"].get<std::string>(), nf["lo"].get<long long>(), nf["hi"].get<long long>()};
                if (f.lo > f.hi) throw DataError(nat + ": empty range");
                d.nums.push_back(std::move(f));
            }
        }
        if (t.contains("derived")) {
            if (!t["derived"].is_array()) throw DataError(at + ".derived: expected array of [var, expr] pairs");
            for (size_t k = 0; k < t["derived"].size(); ++k) {
                const json& p = t["derived"][k];
                if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string()) {
                    throw DataError(at + ".derived[" + std::to_string(k) + "]: expected [var, expr] pair");
                }
                d.derived.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
            }
        }
        if (t.contains("defaults")) {
            if (!t["defaults"].is_object()) throw DataError(at + ".defaults: expected object");
            for (auto it = t["defaults"].begin(); it != t["defaults"].end(); ++it) {
                if (!it.value().is_string()) throw DataError(at + ".defaults." + it.key() + ": expected string");
                d.defaults[it.key()] = it.value().get<std::string>();
            }
        }
        bank.push_back(std::move(d));
    }
    if (bank.empty()) throw DataError(path + ": template bank is empty");
    return bank;
}

void save_template_bank(const std::string& path, const TemplateBank& bank) {
    json arr = json::array();
    for (const auto& t : bank) {
        json j;
        j["id"] = t.id;
        j["question"] = t.question;
        j["solution"] = t.solution;
        j["answer"] = t.answer;
        j["names"] = t.name_count;
        j["nouns"] = t.noun_count;
        j["nums"] = json::array();
        for (const auto& n : t.nums) j["nums"].push_back({{"name", n.name}, {"lo", n.lo}, {"hi", n.hi}});
        j["derived"] = json::array();
        for (const auto& [v, e] : t.derived) j["derived"].push_back({v, e});
        j["defaults"] = t.defaults;
        arr.push_back(std::move(j));
    }
    write_file(path, arr.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// instantiation and sampling
// ---------------------------------------------------------------------------

namespace {

std::string substitute(const TemplateDef& tpl, const std::string& text,
                       const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(text.size() + 16);
    size_t i = 0;
    while (i < text.size()) {
        if (text[i] == '{') {
            size_t close = text.find('}', i + 1);
            if (close == std::string::npos) {
                throw DataError("template '" + tpl.id + "': unterminated placeholder");
            }
            std::string key = text.substr(i + 1, close - i - 1);
            auto it = values.find(key);
            if (it == values.end()) {
                throw DataError("template '" + tpl.id + "': unknown placeholder {" + key + "}");
            }
            out += it->second;
            i = close + 1;
        } else {
            out.push_back(text[i]);
            ++i;
        }
    }
    return out;
}

}  // namespace

Assignment default_assignment(const TemplateDef& tpl) {
    Assignment a;
    for (int i = 0; i < tpl.name_count; ++i) {
        auto it = tpl.defaults.find("name" + std::to_string(i));
        if (it == tpl.defaults.end()) throw DataError("template '" + tpl.id + "': missing default name" + std::to_string(i));
        a.names.push_back(it->second);
    }
    for (int i = 0; i < tpl.noun_count; ++i) {
        auto it = tpl.defaults.find("noun" + std::to_string(i));
        if (it == tpl.defaults.end()) throw DataError("template '" + tpl.id + "': missing default noun" + std::to_string(i));
        a.nouns.push_back(it->second);
    }
    for (const auto& nf : tpl.nums) {
        auto it = tpl.defaults.find(nf.name);
        if (it == tpl.defaults.end()) throw DataError("template '" + tpl.id + "': missing default " + nf.name);
        a.nums[nf.name] = std::stoll(it->second);
    }
    return a;
}

namespace {

// Returns false when a sampled assignment fails the positive-integer value
// constraints (including division by zero); throws DataError for structural
// template defects that no resampling can fix.
bool try_instantiate(const TemplateDef& tpl, const Assignment& a, const std::string& record_id,
                     ProblemRecord& out, std::string* reject_reason) {
    Env env;
    std::map<std::string, std::string> values;
    for (size_t i = 0; i < a.names.size(); ++i) values["name" + std::to_string(i)] = a.names[i];
    for (size_t i = 0; i < a.nouns.size(); ++i) values["noun" + std::to_string(i)] = a.nouns[i];
    for (const auto& [key, v] : a.nums) {
        env[key] = Rational(v);
        values[key] = std::to_string(v);
    }
    auto eval_or_reject = [&](const std::string& what, const std::string& expr, Rational& v) -> bool {
        try {
            v = eval_expression(expr, &env);
        } catch (const ExprException& e) {
            if (e.error.kind == ExprError::Kind::arithmetic) {
                if (reject_reason) *reject_reason = what + ": " + e.what();
                return false;
            }
            throw DataError("template '" + tpl.id + "': " + what + " = " + expr + ": " + e.what());
        }
        if (!v.is_integer() || !v.is_positive()) {
            if (reject_reason) *reject_reason = what + " = " + v.to_string() + " is not a positive integer";
            return false;
        }
        return true;
    };
    for (const auto& [var, expr] : tpl.derived) {
        Rational v;
        if (!eval_or_reject("derived " + var, expr, v)) return false;
        env[var] = v;
        values[var] = v.to_string();
    }
    Rational answer;
    if (!eval_or_reject("answer", tpl.answer, answer)) return false;

    out.id = record_id;
    out.question = substitute(tpl, tpl.question, values);
    out.solution = substitute(tpl, tpl.solution, values) + "\n#### " + answer.to_string();
    out.answer = answer.to_string();
    return true;
}

}  // namespace

ProblemRecord instantiate_template(const TemplateDef& tpl, const Assignment& a, const std::string& record_id) {
    ProblemRecord rec;
    std::string reason;
    if (!try_instantiate(tpl, a, record_id, rec, &reason)) {
        throw DataError("template '" + tpl.id + "': " + reason);
    }
    return rec;
}

namespace {

// Samples one satisfying assignment or throws after max_attempts rejections.
Assignment sample_assignment(const TemplateDef& tpl, Rng& rng, int max_attempts) {
    const auto& names = name_pool();
    const auto& nouns = noun_pool();
    std::string reason;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        Assignment a;
        std::vector<size_t> picked;
        for (int i = 0; i < tpl.name_count; ++i) {
            size_t idx;
            do {
                idx = rng.below(names.size());
            } while (std::find(picked.begin(), picked.end(), idx) != picked.end());
            picked.push_back(idx);
            a.names.push_back(names[idx]);
        }
        for (int i = 0; i < tpl.noun_count; ++i) a.nouns.push_back(nouns[rng.below(nouns.size())]);
        for (const auto& nf : tpl.nums) a.nums[nf.name] = rng.uniform_int(nf.lo, nf.hi);
        ProblemRecord probe;
        if (try_instantiate(tpl, a, "probe", probe, &reason)) return a;
    }
    throw DataError("template '" + tpl.id + "': constraints unsatisfiable in " +
                    std::to_string(max_attempts) + " sampling attempts (last: " + reason + ")");
}

}  // namespace

std::vector<ProblemRecord> generate_synthetic(const TemplateBank& bank, size_t n, uint64_t seed) {
    if (bank.empty()) throw DataError("generate_synthetic: empty template bank");
    Rng rng(mix64(seed));
    std::vector<ProblemRecord> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const TemplateDef& tpl = bank[rng.below(bank.size())];
        Assignment a = sample_assignment(tpl, rng, 1000);
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "syn-%06zu", i);
        out.push_back(instantiate_template(tpl, a, idbuf));
    }
    return out;
}

std::vector<ProblemRecord> perturb_dataset(const TemplateBank& bank, size_t n, uint64_t seed) {
    if (bank.empty()) throw DataError("perturb_dataset: empty template bank");
    Rng rng(mix64(seed ^ 0x70657274ull));
    std::set<std::pair<std::string, Assignment>> seen;
    std::vector<ProblemRecord> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const TemplateDef& tpl = bank[rng.below(bank.size())];
        Assignment a;
        bool fresh = false;
        for (int attempt = 0; attempt < 1000 && !fresh; ++attempt) {
            a = sample_assignment(tpl, rng, 1000);
            fresh = seen.emplace(tpl.id, a).second;
        }
        if (!fresh) {
            throw DataError("template '" + tpl.id + "': could not draw a fresh assignment in 1000 attempts");
        }
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "sym-%06zu", i);
        out.push_back(instantiate_template(tpl, a, idbuf));
    }
    return out;
}

}  // namespace cloze
