#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "voxpatch/error.hpp"
#include "voxpatch/voxb.hpp"

namespace voxpatch {

/// Word-level, lowercased tokenizer. Punctuation marks are tokens of their own.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kVox = 3;  // placeholder position type for 3D tokens
  static constexpr int kUnk = 4;

  Tokenizer() : tokens_{"<pad>", "<bos>", "<eos>", "<vox>", "<unk>"} { reindex(); }

  /// Vocabulary = specials, then the sorted set of words seen in `corpus`.
  static Tokenizer build(const std::vector<std::string>& corpus) {
    std::set<std::string> words;
    for (const auto& text : corpus) {
      for (auto& w : split(text)) words.insert(std::move(w));
    }
    Tokenizer t;
    for (const auto& w : words) t.tokens_.push_back(w);
    t.reindex();
    return t;
  }

  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isspace(c)) {
        flush();
      } else if (is_punct(ch)) {
        flush();
        out.emplace_back(1, ch);
      } else {
        cur.push_back(static_cast<char>(std::tolower(c)));
      }
    }
    flush();
    return out;
  }

  /// Lowercase, single spaces, punctuation attached to the preceding word.
  static std::string normalize(const std::string& text) { return join(split(text)); }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split(text)) {
      auto it = index_.find(w);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    return ids;
  }

  /// Words of the non-special ids, joined back into normalized text.
  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int id : ids) {
      if (id == kPad || id == kBos || id == kEos || id == kVox) continue;
      words.push_back(token(id));
    }
    return join(words);
  }

  const std::string& token(int id) const {
    require(id >= 0 && id < size(), ErrorKind::ConfigError, "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; the id is the 0-based line number.
  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Tokenizer from_text(const std::string& text) {
    std::vector<std::string> tokens;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return from_tokens(std::move(tokens));
  }

  static Tokenizer from_tokens(std::vector<std::string> tokens) {
    Tokenizer t;
    t.tokens_ = std::move(tokens);
    require(t.tokens_.size() >= 5 && t.tokens_[0] == "<pad>" && t.tokens_[1] == "<bos>" && t.tokens_[2] == "<eos>" &&
                t.tokens_[3] == "<vox>" && t.tokens_[4] == "<unk>",
            ErrorKind::FormatError, "vocabulary does not start with the special tokens");
    t.reindex();
    return t;
  }

  void save(const std::filesystem::path& path) const { voxb::write_file(path, to_text()); }
  static Tokenizer load(const std::filesystem::path& path) { return from_text(voxb::read_file(path)); }

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) { return a.tokens_ == b.tokens_; }

 private:
  static bool is_punct(char c) { return c == ',' || c == '.' || c == ';' || c == ':' || c == '!' || c == '?'; }

  static std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
      const bool attach = w.size() == 1 && is_punct(w[0]);
      if (!out.empty() && !attach) out += ' ';
      out += w;
    }
    return out;
  }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

}  // namespace voxpatch
