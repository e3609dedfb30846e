#ifndef TOXLENS_TEXTIO_HPP_
#define TOXLENS_TEXTIO_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "toxlens/error.hpp"

namespace toxlens {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// raw file helpers

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error::io("file_open", "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error::io("file_open", "cannot write " + path);
  out << content;
  if (!out) throw Error::io("file_write", "write failed for " + path);
}

// FNV-1a 64-bit, used for provenance records in run manifests.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

inline std::string hash_file(const std::string& path) { return fnv1a_hex(read_file(path)); }

inline Json parse_json(const std::string& text, const std::string& what) {
  Json parsed = Json::parse(text, nullptr, false);
  if (parsed.is_discarded()) throw Error::io("bad_json", "invalid JSON in " + what);
  return parsed;
}

inline Json load_json(const std::string& path) { return parse_json(read_file(path), path); }

// ---------------------------------------------------------------------------
// vocabulary: token TAB id, one per line, ids dense in [0, V)

constexpr const char* kUnkToken = "<unk>";

class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2) throw Error::validation("bad_vocab", "vocab needs at least two tokens");
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
      if (tokens_[id].empty()) throw Error::validation("bad_vocab", "empty token string");
      if (!ids_.emplace(tokens_[id], static_cast<int>(id)).second) {
        throw Error::validation("bad_vocab", "duplicate token: " + tokens_[id]);
      }
    }
    const auto unk = ids_.find(kUnkToken);
    if (unk == ids_.end()) throw Error::validation("bad_vocab", "vocab is missing the <unk> token");
    unk_id_ = unk->second;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int unk_id() const { return unk_id_; }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw Error::validation("token_out_of_range", "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  // -1 when absent (callers decide between UNK mapping and hard errors).
  int find(const std::string& token) const {
    const auto it = ids_.find(token);
    return it == ids_.end() ? -1 : it->second;
  }

  // Whitespace-split encoding; unknown words map to <unk>.
  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
      const int id = find(word);
      out.push_back(id < 0 ? unk_id_ : id);
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int unk_id_ = -1;
};

inline void save_vocab(const Vocab& vocab, const std::string& path) {
  std::string out;
  for (int id = 0; id < vocab.size(); ++id) {
    out += vocab.token(id);
    out += '\t';
    out += std::to_string(id);
    out += '\n';
  }
  write_file(path, out);
}

inline Vocab load_vocab(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<std::pair<int, std::string>> entries;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error::io("bad_vocab_file", path + ":" + std::to_string(line_no) + " has no TAB");
    }
    int id = 0;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw Error::io("bad_vocab_file", path + ":" + std::to_string(line_no) + " has a malformed id");
    }
    entries.emplace_back(id, line.substr(0, tab));
  }
  std::sort(entries.begin(), entries.end());
  std::vector<std::string> tokens;
  tokens.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != static_cast<int>(i)) {
      throw Error::validation("bad_vocab", "vocab ids must be dense in [0, V)");
    }
    tokens.push_back(entries[i].second);
  }
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// jsonl corpora

struct Prompt {
  std::string id;
  std::string text;
};

struct LabeledText {
  std::string text;
  int label = 0;
};

struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
};

namespace detail {
inline std::vector<Json> read_jsonl(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<Json> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    rows.push_back(parse_json(line, path + ":" + std::to_string(line_no)));
  }
  return rows;
}
}  // namespace detail

inline std::vector<Prompt> load_prompts(const std::string& path) {
  std::vector<Prompt> out;
  for (const Json& row : detail::read_jsonl(path)) {
    if (!row.contains("id") || !row.contains("text")) {
      throw Error::validation("bad_prompts", path + ": each line needs id and text");
    }
    out.push_back({row["id"].get<std::string>(), row["text"].get<std::string>()});
  }
  if (out.empty()) throw Error::validation("empty_prompt_set", path + " has no prompts");
  return out;
}

inline void save_prompts(std::span<const Prompt> prompts, const std::string& path) {
  std::string out;
  for (const Prompt& p : prompts) {
    out += Json{{"id", p.id}, {"text", p.text}}.dump();
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<LabeledText> load_labeled(const std::string& path) {
  std::vector<LabeledText> out;
  for (const Json& row : detail::read_jsonl(path)) {
    if (!row.contains("text") || !row.contains("label")) {
      throw Error::validation("bad_labeled", path + ": each line needs text and label");
    }
    const int label = row["label"].get<int>();
    if (label != 0 && label != 1) throw Error::validation("bad_labeled", "label must be 0 or 1");
    out.push_back({row["text"].get<std::string>(), label});
  }
  return out;
}

inline void save_labeled(std::span<const LabeledText> rows, const std::string& path) {
  std::string out;
  for (const LabeledText& r : rows) {
    out += Json{{"text", r.text}, {"label", r.label}}.dump();
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<PreferencePair> load_pairs(const std::string& path) {
  std::vector<PreferencePair> out;
  for (const Json& row : detail::read_jsonl(path)) {
    if (!row.contains("prompt") || !row.contains("chosen") || !row.contains("rejected")) {
      throw Error::validation("bad_pairs", path + ": each line needs prompt/chosen/rejected");
    }
    out.push_back({row["prompt"].get<std::string>(), row["chosen"].get<std::string>(),
                   row["rejected"].get<std::string>()});
  }
  return out;
}

inline void save_pairs(std::span<const PreferencePair> rows, const std::string& path) {
  std::string out;
  for (const PreferencePair& r : rows) {
    out += Json{{"prompt", r.prompt}, {"chosen", r.chosen}, {"rejected", r.rejected}}.dump();
    out += '\n';
  }
  write_file(path, out);
}

// ---------------------------------------------------------------------------
// lexicon: disjoint toxic / nontoxic token string sets

struct Lexicon {
  std::vector<std::string> toxic;
  std::vector<std::string> nontoxic;

  void validate() const {
    std::set<std::string> t(toxic.begin(), toxic.end());
    std::set<std::string> n(nontoxic.begin(), nontoxic.end());
    if (t.size() != toxic.size() || n.size() != nontoxic.size()) {
      throw Error::validation("bad_lexicon", "lexicon sides must not contain duplicates");
    }
    for (const std::string& tok : toxic) {
      if (n.count(tok)) throw Error::validation("bad_lexicon", "lexicon sides overlap on: " + tok);
    }
  }
};

inline Lexicon load_lexicon(const std::string& path) {
  const Json parsed = load_json(path);
  if (!parsed.contains("toxic") || !parsed.contains("nontoxic")) {
    throw Error::validation("bad_lexicon", path + " needs toxic and nontoxic arrays");
  }
  Lexicon lex;
  lex.toxic = parsed["toxic"].get<std::vector<std::string>>();
  lex.nontoxic = parsed["nontoxic"].get<std::vector<std::string>>();
  lex.validate();
  return lex;
}

inline void save_lexicon(const Lexicon& lex, const std::string& path) {
  lex.validate();
  write_file(path, Json{{"toxic", lex.toxic}, {"nontoxic", lex.nontoxic}}.dump(2) + "\n");
}

}  // namespace toxlens

#endif  // TOXLENS_TEXTIO_HPP_
