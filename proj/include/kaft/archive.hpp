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

// Single-file model archive:
//
//   "KAFTARCH" | u32 format_version | u64 header_len | header JSON |
//   u32 n_sections | n_sections × ParameterSet::write() payloads
//
// The header carries the model kind, its config and the tokenizer vocab.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kaft/nn.hpp"

namespace kaft {

inline constexpr std::uint32_t kArchiveFormatVersion = 1;

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<const nn::ParameterSet*>& sections);

struct ArchiveReader {
  nlohmann::json header;
  std::uint32_t format_version = 0;
  // Raw section payloads, consumed with ParameterSet::read().
  std::vector<std::string> sections;
};

ArchiveReader read_archive(const std::filesystem::path& path);

// Whole-file text helpers. The write goes to a sibling temp file first and is
// renamed into place; parent directories are created.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace kaft
