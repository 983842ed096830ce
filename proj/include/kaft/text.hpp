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

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kaft {

// UTF-8 helpers. Invalid bytes decode as U+FFFD and consume one byte.
std::vector<char32_t> utf8_decode(std::string_view s);
std::string utf8_encode(char32_t cp);
bool is_cjk(char32_t cp);

// Metric tokenization: whitespace-separated tokens, except that every CJK
// code point is a token of its own.
std::vector<std::string> metric_tokens(std::string_view text);

// Number of metric tokens; used for context budgets.
std::size_t count_tokens(std::string_view text);

// Lowercase, drop punctuation, map full-width digits/letters to ASCII,
// collapse whitespace. Used for value-string containment checks.
std::string normalize_value(std::string_view text);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
bool contains(std::string_view haystack, std::string_view needle);

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

// Word-level vocabulary shared by the retriever encoders and the local LM.
// Tokenization is metric_tokens() with trailing sentence punctuation
// (.,?!;:) split off into separate tokens. Words mixing digits and letters are
// split into digit runs and letter runs; every piece after the first carries
// the "##" join prefix.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kKnowledge = 3;  // starts the knowledge block
  static constexpr int kContext = 4;    // starts the dialog context
  static constexpr int kResponse = 5;   // starts the response
  static constexpr int kEnd = 6;        // end of response / label
  static constexpr int kDecision = 7;   // starts a decision label
  static constexpr int kNumSpecial = 8;
  static constexpr std::string_view kJoin = "##";

  Tokenizer();

  // Builds a vocabulary from the given texts. Tokens seen fewer than
  // min_count times map to [UNK].
  static Tokenizer build(const std::vector<std::string>& texts, int min_count = 1);
  static Tokenizer from_tokens(const std::vector<std::string>& tokens);

  static std::vector<std::string> split(std::string_view text);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace kaft
