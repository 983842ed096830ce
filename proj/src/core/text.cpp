// Copyright 2026 The kaft-dialog Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "kaft/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include <openssl/evp.h>

#include "kaft/error.hpp"

namespace kaft {

namespace {

const char* const kSpecialTokens[Tokenizer::kNumSpecial] = {
    "[PAD]", "[UNK]", "[BOS]", "[KNOW]", "[CTX]", "[RESP]", "[END]", "[DEC]"};

bool is_space(char32_t cp) {
  return cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == U'\f' ||
         cp == U'\v' || cp == 0x3000;
}

bool is_split_punct(char c) {
  return c == '.' || c == ',' || c == '?' || c == '!' || c == ';' || c == ':';
}

bool is_punct_token(const std::string& tok) {
  return tok.size() == 1 && is_split_punct(tok[0]);
}

bool token_is_cjk(const std::string& tok) {
  auto cps = utf8_decode(tok);
  return cps.size() == 1 && is_cjk(cps[0]);
}

}  // namespace

std::vector<char32_t> utf8_decode(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      cp = c & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (int k = 1; ok && k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) {
        ok = false;
      } else {
        cp = (cp << 6) | (cc & 0x3F);
      }
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
    } else {
      out.push_back(cp);
      i += len;
    }
  }
  return out;
}

std::string utf8_encode(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

bool is_cjk(char32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) ||   // unified ideographs
         (cp >= 0x3400 && cp <= 0x4DBF) ||   // extension A
         (cp >= 0x20000 && cp <= 0x2FA1F) || // extensions B.. and compatibility
         (cp >= 0xF900 && cp <= 0xFAFF) ||   // compatibility ideographs
         (cp >= 0x3001 && cp <= 0x303F) ||   // CJK symbols and punctuation
         (cp >= 0x3040 && cp <= 0x30FF) ||   // kana
         (cp >= 0xFF01 && cp <= 0xFF60);     // full-width forms
}

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (char32_t cp : utf8_decode(text)) {
    if (is_space(cp)) {
      flush();
    } else if (is_cjk(cp)) {
      flush();
      out.push_back(utf8_encode(cp));
    } else {
      cur += utf8_encode(cp);
    }
  }
  flush();
  return out;
}

std::size_t count_tokens(std::string_view text) { return metric_tokens(text).size(); }

std::string normalize_value(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char32_t cp : utf8_decode(text)) {
    if (cp >= 0xFF01 && cp <= 0xFF5E) cp -= 0xFEE0;
    if (is_space(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (cp < 0x80) {
      const char c = static_cast<char>(cp);
      if ((c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
          (c >= '{' && c <= '~')) {
        continue;
      }
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c));
      continue;
    }
    if ((cp >= 0x3000 && cp <= 0x303F) || (cp >= 0xFF5F && cp <= 0xFF65)) continue;
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out += utf8_encode(cp);
  }
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

bool contains(std::string_view haystack, std::string_view needle) {
  return haystack.find(needle) != std::string_view::npos;
}

Tokenizer::Tokenizer() {
  for (const char* t : kSpecialTokens) {
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.emplace_back(t);
  }
}

namespace {

bool is_digit(char c) { return c >= '0' && c <= '9'; }

// "24GB" -> "24" "##GB", so a number shares one token across units.
void push_word(std::vector<std::string>& out, const std::string& word) {
  if (std::none_of(word.begin(), word.end(), is_digit)) {
    out.push_back(word);
    return;
  }
  std::size_t i = 0;
  bool first = true;
  while (i < word.size()) {
    const bool digits = is_digit(word[i]);
    std::size_t j = i + 1;
    while (j < word.size() && is_digit(word[j]) == digits) ++j;
    out.push_back((first ? "" : std::string(Tokenizer::kJoin)) + word.substr(i, j - i));
    first = false;
    i = j;
  }
}

}  // namespace

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  for (auto& tok : metric_tokens(text)) {
    std::size_t end = tok.size();
    while (end > 1 && is_split_punct(tok[end - 1])) --end;
    push_word(out, tok.substr(0, end));
    for (std::size_t i = end; i < tok.size(); ++i) out.emplace_back(1, tok[i]);
  }
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts, int min_count) {
  std::map<std::string, int> counts;
  for (const auto& text : texts) {
    for (auto& tok : split(text)) ++counts[tok];
  }
  Tokenizer tk;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count && !tk.index_.count(tok)) {
      tk.index_.emplace(tok, static_cast<int>(tk.tokens_.size()));
      tk.tokens_.push_back(tok);
    }
  }
  return tk;
}

Tokenizer Tokenizer::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kNumSpecial) {
    fail(ErrorCode::kParse, "tokenizer vocabulary is missing the special tokens");
  }
  Tokenizer tk;
  for (int i = 0; i < kNumSpecial; ++i) {
    if (tokens[i] != kSpecialTokens[i]) {
      fail(ErrorCode::kParse, "tokenizer special token mismatch at index " + std::to_string(i));
    }
  }
  for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) {
    if (!tk.index_.emplace(tokens[i], static_cast<int>(tk.tokens_.size())).second) {
      fail(ErrorCode::kParse, "duplicate token in vocabulary: " + tokens[i]);
    }
    tk.tokens_.push_back(tokens[i]);
  }
  return tk;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : split(text)) ids.push_back(id(tok));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  const std::string* prev = nullptr;
  for (int i : ids) {
    if (i < kNumSpecial && i != kUnk) continue;
    const std::string& tok = token(i);
    if (tok.size() > kJoin.size() && tok.compare(0, kJoin.size(), kJoin) == 0) {
      out.append(tok, kJoin.size(), std::string::npos);
      prev = &tok;
      continue;
    }
    if (prev != nullptr && !is_punct_token(tok) && !(token_is_cjk(tok) && token_is_cjk(*prev))) {
      out.push_back(' ');
    }
    out += tok;
    prev = &tok;
  }
  return out;
}

int Tokenizer::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= size()) return tokens_[kUnk];
  return tokens_[static_cast<std::size_t>(id)];
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorCode::kInternal, "SHA-256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kOk: return "ok";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kParse: return "parse_error";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kTraining: return "training_error";
    case ErrorCode::kTransport: return "transport_error";
    case ErrorCode::kTimeout: return "timeout";
    case ErrorCode::kRateLimited: return "rate_limited";
    case ErrorCode::kMalformedReply: return "malformed_reply";
    case ErrorCode::kCacheMiss: return "cache_miss";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kInternal: return "internal_error";
  }
  return "unknown";
}

}  // namespace kaft
