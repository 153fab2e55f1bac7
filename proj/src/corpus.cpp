#include "knnlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <fstream>
#include <sstream>

namespace knnlm {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; }

constexpr std::uint32_t kTokenFileVersion = 1;

}  // namespace

void scan_tokens(std::string_view text,
                 const std::function<void(std::string_view, bool)>& fn) {
    std::size_t i = 0;
    const std::size_t n = text.size();
    bool line_has_token = false;
    bool doc_has_token = false;
    while (i < n) {
        const char c = text[i];
        if (c == '\n') {
            if (!line_has_token && doc_has_token) {
                fn({}, true);
                doc_has_token = false;
            }
            line_has_token = false;
            ++i;
            continue;
        }
        if (is_space(c)) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && !is_space(text[j])) ++j;
        fn(text.substr(i, j - i), false);
        line_has_token = true;
        doc_has_token = true;
        i = j;
    }
}

// ---------------------------------------------------------------------------

Vocab Vocab::build(std::string_view text, std::uint64_t min_count, std::size_t max_size) {
    require(min_count >= 1, ErrorCode::InvalidArgument, "min_count must be >= 1");
    require(max_size >= 2, ErrorCode::InvalidArgument, "max_size must be >= 2");

    std::unordered_map<std::string, std::uint64_t> counts;
    std::uint64_t unk = 0;
    std::uint64_t total = 0;
    scan_tokens(text, [&](std::string_view tok, bool boundary) {
        if (boundary) return;
        ++total;
        if (tok == kUnkToken) {
            ++unk;
        } else if (tok != kBosToken) {
            ++counts[std::string(tok)];
        }
    });
    require(total > 0, ErrorCode::EmptyInput, "empty corpus");

    std::vector<std::pair<std::string, std::uint64_t>> entries(counts.begin(), counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.min_count_ = min_count;
    v.tokens_ = {std::string(kUnkToken), std::string(kBosToken)};
    v.counts_ = {0, 0};
    for (const auto& [tok, c] : entries) {
        if (c >= min_count && v.tokens_.size() < max_size) {
            v.tokens_.push_back(tok);
            v.counts_.push_back(c);
        } else {
            unk += c;
        }
    }
    v.counts_[kUnkId] = unk;
    v.index();
    return v;
}

void Vocab::index() {
    ids_.clear();
    ids_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const bool inserted = ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second;
        require(inserted, ErrorCode::Format, "duplicate vocabulary entry: " + tokens_[i]);
    }
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocab::id(std::string_view token) const { return find(token).value_or(kUnkId); }

void Vocab::save(const std::string& path) const {
    std::ostringstream out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << counts_[i] << '\n';
    write_text_file(path, out.str());
}

Vocab Vocab::load(const std::string& path) {
    std::istringstream in(read_text_file(path));
    Vocab v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.rfind('\t');
        require(tab != std::string::npos && tab > 0, ErrorCode::Format,
                path + ":" + std::to_string(lineno) + ": expected token<TAB>count");
        v.tokens_.push_back(line.substr(0, tab));
        try {
            v.counts_.push_back(std::stoull(line.substr(tab + 1)));
        } catch (const std::exception&) {
            fail(ErrorCode::Format, path + ":" + std::to_string(lineno) + ": bad count");
        }
    }
    require(v.tokens_.size() >= 2 && v.tokens_[0] == kUnkToken && v.tokens_[1] == kBosToken,
            ErrorCode::Format, path + ": first two entries must be the UNK and BOS sentinels");
    v.min_count_ = 1;
    if (v.tokens_.size() > 2)
        v.min_count_ = *std::min_element(v.counts_.begin() + 2, v.counts_.end());
    v.index();
    return v;
}

// ---------------------------------------------------------------------------

std::size_t TokenSequence::doc_of(std::size_t pos) const {
    auto it = std::upper_bound(doc_offsets.begin(), doc_offsets.end(), pos);
    return static_cast<std::size_t>(it - doc_offsets.begin()) - 1;
}

void TokenSequence::validate(std::size_t vocab_size) const {
    for (TokenId id : ids)
        require(id < vocab_size, ErrorCode::InvalidArgument,
                "token id " + std::to_string(id) + " out of range for vocab size " +
                    std::to_string(vocab_size));
    if (ids.empty()) {
        require(doc_offsets.empty(), ErrorCode::Format, "empty sequence with documents");
        return;
    }
    require(!doc_offsets.empty() && doc_offsets.front() == 0, ErrorCode::Format,
            "doc_offsets must start at 0");
    for (std::size_t i = 1; i < doc_offsets.size(); ++i)
        require(doc_offsets[i] > doc_offsets[i - 1], ErrorCode::Format,
                "doc_offsets must be strictly increasing");
    require(doc_offsets.back() < ids.size(), ErrorCode::Format, "last doc offset out of range");
}

std::uint64_t TokenSequence::hash() const {
    Fnv1a h;
    h.update(std::span<const TokenId>(ids));
    h.update(std::span<const std::uint64_t>(doc_offsets));
    return h.digest();
}

void TokenSequence::save(const std::string& path) const {
    BinaryWriter w(path);
    w.bytes("NLMT", 4);
    w.pod<std::uint32_t>(kTokenFileVersion);
    w.pod<std::uint64_t>(ids.size());
    w.pod<std::uint64_t>(doc_offsets.size());
    w.array(std::span<const TokenId>(ids));
    w.array(std::span<const std::uint64_t>(doc_offsets));
    w.close();
}

TokenSequence TokenSequence::load(const std::string& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes.data(), bytes.size(), path);
    r.expect_magic("NLMT");
    const auto version = r.pod<std::uint32_t>();
    require(version == kTokenFileVersion, ErrorCode::Format,
            path + ": unsupported token file version " + std::to_string(version));
    const auto n = r.pod<std::uint64_t>();
    const auto docs = r.pod<std::uint64_t>();
    TokenSequence seq;
    seq.ids = r.array<TokenId>(n);
    seq.doc_offsets = r.array<std::uint64_t>(docs);
    require(r.remaining() == 0, ErrorCode::Format, path + ": trailing bytes");
    seq.validate(std::numeric_limits<TokenId>::max());
    return seq;
}

TokenSequence encode(std::string_view text, const Vocab& vocab) {
    TokenSequence seq;
    bool start_doc = true;
    scan_tokens(text, [&](std::string_view tok, bool boundary) {
        if (boundary) {
            start_doc = true;
            return;
        }
        if (start_doc) {
            seq.doc_offsets.push_back(seq.ids.size());
            start_doc = false;
        }
        seq.ids.push_back(vocab.id(tok));
    });
    return seq;
}

std::string decode_range(const TokenSequence& seq, const Vocab& vocab, std::size_t begin,
                         std::size_t end) {
    std::string out;
    end = std::min(end, seq.size());
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) {
            const bool doc_start =
                std::binary_search(seq.doc_offsets.begin(), seq.doc_offsets.end(), i);
            out += doc_start ? "\n\n" : " ";
        }
        out += vocab.token(seq.ids[i]);
    }
    return out;
}

std::string decode(const TokenSequence& seq, const Vocab& vocab) {
    return decode_range(seq, vocab, 0, seq.size());
}

// ---------------------------------------------------------------------------

void WindowSpec::validate() const {
    require(context_len >= 1, ErrorCode::InvalidArgument, "context_len must be >= 1");
}

void window_context(const TokenSequence& seq, const WindowSpec& spec, std::size_t pos,
                    std::span<TokenId> out) {
    const std::size_t n = spec.context_len;
    const std::size_t start = seq.doc_begin(seq.doc_of(pos));
    for (std::size_t j = 0; j < n; ++j) {
        // slot j holds the token at pos - n + j
        const std::size_t back = n - j;
        out[j] = (pos >= start + back) ? seq.ids[pos - back] : spec.pad;
    }
}

WindowSet::WindowSet(const TokenSequence& seq, const WindowSpec& spec) : n_(spec.context_len) {
    spec.validate();
    const std::size_t total = seq.size();
    contexts_.assign(total * n_, spec.pad);
    targets_.assign(seq.ids.begin(), seq.ids.end());
    for (std::size_t d = 0; d < seq.doc_count(); ++d) {
        const std::size_t b = seq.doc_begin(d);
        const std::size_t e = seq.doc_end(d);
        for (std::size_t pos = b; pos < e; ++pos) {
            TokenId* ctx = contexts_.data() + pos * n_;
            for (std::size_t j = 0; j < n_; ++j) {
                const std::size_t back = n_ - j;
                if (pos >= b + back) ctx[j] = seq.ids[pos - back];
            }
        }
    }
}

}  // namespace knnlm
