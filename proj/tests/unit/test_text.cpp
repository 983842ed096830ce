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

#include "doctest.h"
#include "kaft/error.hpp"
#include "kaft/text.hpp"

using namespace kaft;

TEST_CASE("metric tokens split CJK code points and whitespace") {
  const auto t = metric_tokens("查询 my 流量 balance");
  const std::vector<std::string> want = {"查", "询", "my", "流", "量", "balance"};
  CHECK(t == want);
  CHECK(count_tokens("  a   b\tc\n") == 3);
  CHECK(count_tokens("") == 0);
}

TEST_CASE("utf8 round trip and invalid bytes") {
  const std::string s = "a流€";
  std::string back;
  for (char32_t cp : utf8_decode(s)) back += utf8_encode(cp);
  CHECK(back == s);
  const auto bad = utf8_decode("\xff" "a");
  REQUIRE(bad.size() == 2);
  CHECK(bad[0] == U'�');
  CHECK(bad[1] == U'a');
}

TEST_CASE("value normalization") {
  CHECK(normalize_value("  The  50GB, Plan! ") == "the 50gb plan");
  CHECK(normalize_value("５０ＧＢ") == "50gb");
  CHECK(trim("\t x \n") == "x");
  CHECK(to_lower("AbC") == "abc");
}

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("tokenizer splits digit runs with the join prefix") {
  const auto parts = Tokenizer::split("costs 88yuan now.");
  const std::vector<std::string> want = {"costs", "88", "##yuan", "now", "."};
  CHECK(parts == want);
}

TEST_CASE("tokenizer encode and decode") {
  const Tokenizer tok = Tokenizer::build({"the plan costs 88yuan per month.", "send KHUX to 10086"});
  CHECK(tok.token(Tokenizer::kPad) == tok.token(0));
  const std::string text = "the plan costs 88yuan per month.";
  CHECK(tok.decode(tok.encode(text)) == text);
  const auto ids = tok.encode("the unseen word");
  CHECK(ids[1] == Tokenizer::kUnk);
  CHECK(tok.id("plan") >= Tokenizer::kNumSpecial);
}

TEST_CASE("tokenizer min_count maps rare words to unk") {
  const Tokenizer tok = Tokenizer::build({"a a b"}, 2);
  CHECK(tok.encode("a")[0] != Tokenizer::kUnk);
  CHECK(tok.encode("b")[0] == Tokenizer::kUnk);
}

TEST_CASE("error code names") {
  CHECK(std::string(error_code_name(ErrorCode::kCacheMiss)) == "cache_miss");
  CHECK(std::string(error_code_name(ErrorCode::kNotFound)) == "not_found");
}
