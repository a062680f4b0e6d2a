#include "cloze/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

#include "cloze/common.hpp"

namespace cloze {

namespace {

std::string printable_byte(unsigned char b) {
    if (b >= 0x21 && b <= 0x7e) return std::string(1, static_cast<char>(b));
    char buf[8];
    std::snprintf(buf, sizeof buf, "0x%02x", b);
    return buf;
}

}  // namespace

Vocab Vocab::build(const std::vector<ProblemRecord>& corpus, const VocabConfig& config) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    if (config.sentinel_count < 1) throw DataError("build_vocab: sentinel count must be >= 1");

    std::set<unsigned char> seen;
    for (const auto& r : corpus) {
        for (unsigned char c : r.question) seen.insert(c);
        for (unsigned char c : r.solution) seen.insert(c);
    }

    Vocab v;
    v.byte_to_id_.assign(256, -1);
    for (unsigned char c : seen) {  // std::set iterates in codepoint order
        v.byte_to_id_[c] = static_cast<TokenId>(v.id_to_token_.size());
        v.id_to_token_.push_back(std::string(1, static_cast<char>(c)));
    }
    v.first_reserved_ = static_cast<TokenId>(v.id_to_token_.size());

    auto add_reserved = [&v](const std::string& form) {
        TokenId id = static_cast<TokenId>(v.id_to_token_.size());
        v.id_to_token_.push_back(form);
        return id;
    };
    v.reserved_.pad_id = add_reserved("<PAD>");
    v.reserved_.bos_id = add_reserved("<BOS>");
    v.reserved_.eos_id = add_reserved("<EOS>");
    v.reserved_.sep_id = add_reserved("<SEP>");
    v.reserved_.mft_mask_id = add_reserved("<M>");
    for (int i = 0; i < config.sentinel_count; ++i) {
        v.reserved_.sentinel_ids.push_back(add_reserved("<X" + std::to_string(i) + ">"));
    }
    v.finish_build();
    return v;
}

void Vocab::finish_build() {
    reserved_forms_.clear();
    for (size_t id = first_reserved_; id < id_to_token_.size(); ++id) {
        reserved_forms_.push_back(id_to_token_[id]);
    }
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size()) {
        throw DataError("token id out of range: " + std::to_string(id));
    }
    return id_to_token_[static_cast<size_t>(id)];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size());
    const TokenId lt = byte_to_id_[static_cast<unsigned char>('<')];
    for (size_t i = 0; i < text.size(); ++i) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (c == '<') {
            for (const auto& form : reserved_forms_) {
                if (text.size() - i >= form.size() && text.compare(i, form.size(), form) == 0) {
                    // literal reserved surface form: double the leading '<'
                    if (lt < 0) throw DataError("encode: '<' not in vocabulary at offset " + std::to_string(i));
                    out.push_back(lt);
                    break;
                }
            }
        }
        TokenId id = byte_to_id_[c];
        if (id < 0) {
            throw DataError("encode: character '" + printable_byte(c) + "' at offset " + std::to_string(i) +
                            " is not in the vocabulary");
        }
        out.push_back(id);
    }
    return out;
}

Vocab::Decoded Vocab::decode_with_offsets(const std::vector<TokenId>& ids) const {
    Decoded d;
    d.offsets.reserve(ids.size());
    const size_t n = ids.size();

    // True when ids[i..] are char tokens spelling `form` exactly.
    auto chars_spell = [&](size_t i, const std::string& form) {
        if (i + form.size() > n) return false;
        for (size_t k = 0; k < form.size(); ++k) {
            TokenId id = ids[i + k];
            if (!is_char(id) || id_to_token_[static_cast<size_t>(id)][0] != form[k]) return false;
        }
        return true;
    };

    for (size_t i = 0; i < n; ++i) {
        TokenId id = ids[i];
        const std::string& tok = token(id);
        if (is_char(id) && tok[0] == '<') {
            // escape collapse: '<' followed by char tokens spelling a
            // reserved form drops this token
            bool collapse = false;
            for (const auto& form : reserved_forms_) {
                if (chars_spell(i + 1, form)) {
                    collapse = true;
                    break;
                }
            }
            if (collapse) {
                d.offsets.emplace_back(d.text.size(), d.text.size());
                continue;
            }
        }
        d.offsets.emplace_back(d.text.size(), d.text.size() + tok.size());
        d.text += tok;
    }
    return d;
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
    return decode_with_offsets(ids).text;
}

std::vector<std::string> Vocab::to_lines() const {
    std::vector<std::string> lines;
    lines.push_back("# clozemath vocab v1");
    for (size_t id = 0; id < id_to_token_.size(); ++id) {
        std::ostringstream ss;
        ss << id << "\t";
        if (static_cast<TokenId>(id) < first_reserved_) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "0x%02x", static_cast<unsigned char>(id_to_token_[id][0]));
            ss << "char\t" << buf;
        } else {
            ss << "reserved\t" << id_to_token_[id];
        }
        lines.push_back(ss.str());
    }
    return lines;
}

Vocab Vocab::from_lines(const std::vector<std::string>& lines) {
    Vocab v;
    v.byte_to_id_.assign(256, -1);
    v.first_reserved_ = -1;
    int sentinel_next = 0;
    for (const auto& line : lines) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string id_str, kind, repr;
        if (!std::getline(ss, id_str, '\t') || !std::getline(ss, kind, '\t') || !std::getline(ss, repr)) {
            throw DataError("vocab: malformed line: " + line);
        }
        TokenId id = static_cast<TokenId>(std::stol(id_str));
        if (id != static_cast<TokenId>(v.id_to_token_.size())) {
            throw DataError("vocab: ids must be contiguous from 0, got " + id_str);
        }
        if (kind == "char") {
            if (v.first_reserved_ >= 0) throw DataError("vocab: char token after reserved block");
            if (repr.size() != 4 || repr[0] != '0' || repr[1] != 'x') {
                throw DataError("vocab: bad char repr: " + repr);
            }
            unsigned byte = std::stoul(repr.substr(2), nullptr, 16);
            if (byte > 255 || v.byte_to_id_[byte] >= 0) throw DataError("vocab: bad or duplicate byte " + repr);
            v.byte_to_id_[byte] = id;
            v.id_to_token_.push_back(std::string(1, static_cast<char>(byte)));
        } else if (kind == "reserved") {
            if (v.first_reserved_ < 0) v.first_reserved_ = id;
            if (repr == "<PAD>") v.reserved_.pad_id = id;
            else if (repr == "<BOS>") v.reserved_.bos_id = id;
            else if (repr == "<EOS>") v.reserved_.eos_id = id;
            else if (repr == "<SEP>") v.reserved_.sep_id = id;
            else if (repr == "<M>") v.reserved_.mft_mask_id = id;
            else if (repr == "<X" + std::to_string(sentinel_next) + ">") {
                v.reserved_.sentinel_ids.push_back(id);
                ++sentinel_next;
            } else {
                throw DataError("vocab: unexpected reserved token: " + repr);
            }
            v.id_to_token_.push_back(repr);
        } else {
            throw DataError("vocab: unknown token kind: " + kind);
        }
    }
    if (v.first_reserved_ < 0 || v.reserved_.pad_id < 0 || v.reserved_.bos_id < 0 || v.reserved_.eos_id < 0 ||
        v.reserved_.sep_id < 0 || v.reserved_.mft_mask_id < 0 || v.reserved_.sentinel_ids.empty()) {
        throw DataError("vocab: incomplete reserved block");
    }
    v.finish_build();
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ostringstream out;
    for (const auto& line : to_lines()) out << line << "\n";
    write_file(path, out.str());
}

Vocab Vocab::load(const std::string& path) {
    return from_lines(split_lines(read_file(path)));
}

}  // namespace cloze
