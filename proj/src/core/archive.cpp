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

#include "kaft/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "kaft/error.hpp"

namespace kaft {

namespace {
constexpr char kMagic[8] = {'K', 'A', 'F', 'T', 'A', 'R', 'C', 'H'};
}

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<const nn::ParameterSet*>& sections) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp);
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kArchiveFormatVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    nlohmann::json h = header;
    h["format_version"] = kArchiveFormatVersion;
    const std::string text = h.dump();
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    const auto n = static_cast<std::uint32_t>(sections.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (const auto* s : sections) {
      std::ostringstream buf(std::ios::binary);
      s->write(buf);
      const std::string payload = buf.str();
      const std::uint64_t plen = payload.size();
      out.write(reinterpret_cast<const char*>(&plen), sizeof plen);
      out.write(payload.data(), static_cast<std::streamsize>(plen));
    }
    if (!out) fail(ErrorCode::kIo, "failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ArchiveReader read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    fail(ErrorCode::kParse, path.string() + " is not a model archive");
  }
  ArchiveReader r;
  in.read(reinterpret_cast<char*>(&r.format_version), sizeof r.format_version);
  if (r.format_version != kArchiveFormatVersion) {
    fail(ErrorCode::kParse, path.string() + ": unsupported archive format version " +
                                std::to_string(r.format_version));
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 32)) fail(ErrorCode::kParse, path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  r.header = nlohmann::json::parse(text);
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint64_t plen = 0;
    in.read(reinterpret_cast<char*>(&plen), sizeof plen);
    if (!in || plen > (1ULL << 34)) fail(ErrorCode::kParse, path.string() + ": corrupt section");
    std::string payload(plen, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(plen));
    if (!in) fail(ErrorCode::kParse, path.string() + ": truncated section");
    r.sections.push_back(std::move(payload));
  }
  return r;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp.string());
    out << text;
    if (!out) fail(ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace kaft
