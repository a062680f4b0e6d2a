#pragma once

// Byte-level tokenizer (digits atomic by construction) with a reserved block
// appended after the text tokens: <PAD>, <BOS>, <EOS>, <SEP>, <M> and K
// sentinel tokens <X0>..<X{K-1}>. Reserved ids can never be produced by raw
// text; literal occurrences of a reserved surface form are escaped by
// doubling the leading '<' and decode undoes the escape.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cloze/corpus.hpp"

namespace cloze {

using TokenId = int32_t;

struct ReservedTokens {
    TokenId pad_id = -1;
    TokenId bos_id = -1;
    TokenId eos_id = -1;
    TokenId sep_id = -1;
    TokenId mft_mask_id = -1;
    std::vector<TokenId> sentinel_ids;
};

struct VocabConfig {
    enum class Mode { char_digit } mode = Mode::char_digit;
    int sentinel_count = 32;  // K
};

class Vocab {
public:
    static Vocab build(const std::vector<ProblemRecord>& corpus, const VocabConfig& config = {});

    size_t size() const { return id_to_token_.size(); }
    const ReservedTokens& reserved() const { return reserved_; }
    TokenId first_reserved_id() const { return first_reserved_; }
    bool is_reserved(TokenId id) const { return id >= first_reserved_; }
    bool is_char(TokenId id) const { return id >= 0 && id < first_reserved_; }

    // surface form of one token ("a", "<SEP>", ...)
    const std::string& token(TokenId id) const;

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(const std::vector<TokenId>& ids) const;

    // decode plus, per token, the [start, end) byte range it produced in the
    // output text (escape-collapsed '<' tokens map to an empty range).
    struct Decoded {
        std::string text;
        std::vector<std::pair<size_t, size_t>> offsets;
    };
    Decoded decode_with_offsets(const std::vector<TokenId>& ids) const;

    // One token per line in id order; loading reproduces the id assignment.
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    std::vector<std::string> to_lines() const;
    static Vocab from_lines(const std::vector<std::string>& lines);

private:
    std::vector<std::string> id_to_token_;
    std::vector<TokenId> byte_to_id_;  // 256 entries, -1 when absent
    ReservedTokens reserved_;
    TokenId first_reserved_ = 0;
    std::vector<std::string> reserved_forms_;  // surface forms, match targets for escaping

    void finish_build();
};

}  // namespace cloze
