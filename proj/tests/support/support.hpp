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

// Shared fixtures for the test binaries.

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/experiment.hpp"
#include "kaft/nn.hpp"

namespace kaft::testing {

// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& tag);

// Synthetic corpus with n_dialogs dialogs and the default spec otherwise.
CorpusSplits small_corpus(int n_dialogs = 40, std::uint64_t seed = 7);

KnowledgePiece make_piece(const std::string& id, Source source, const std::string& title, const std::string& body,
                          std::vector<std::string> values = {});

// Single-split corpus holding `dialogs` in train, dev and test.
CorpusSplits corpus_of(std::vector<Dialog> dialogs, std::vector<KnowledgePiece> faq,
                       std::vector<KnowledgePiece> product);

// Small model sizes and short schedules; everything trains in seconds.
BundleConfig tiny_bundle_config(std::uint64_t seed = 1);

struct TinyBundle {
  std::filesystem::path corpus_dir;
  std::filesystem::path bundle_dir;
};

// A 40-dialog corpus and a bundle with every checkpoint, trained once per
// process.
const TinyBundle& tiny_bundle();

// ||analytic - numeric|| / (||analytic|| + ||numeric||) over the entries of
// one parameter slot, using central differences. At most max_entries entries
// are checked, spread evenly over the slot. The denominator is floored at
// 1e-6. The norm of the checked analytic entries goes to analytic_norm.
double grad_relative_error(nn::ParameterSet& params, std::size_t slot,
                           const std::function<nn::Var(nn::Tape&)>& loss, double eps = 1e-5,
                           int max_entries = 256, double* analytic_norm = nullptr);

}  // namespace kaft::testing
