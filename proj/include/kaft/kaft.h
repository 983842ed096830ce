/* Copyright 2026 The kaft-dialog Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/* C interface to libkaft.
 *
 * Every function returns a kaft_status. On failure the message is available
 * from kaft_last_error() on the calling thread until the next call. Strings
 * returned through char** out-parameters are owned by the caller and released
 * with kaft_string_free(). Configuration and results are JSON text.
 */

#ifndef KAFT_KAFT_H_
#define KAFT_KAFT_H_

#include <stdint.h>

#if defined(KAFT_BUILDING_LIBRARY)
#define KAFT_API __attribute__((visibility("default")))
#else
#define KAFT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum kaft_status {
  KAFT_OK = 0,
  KAFT_INVALID_ARGUMENT = 1,
  KAFT_PARSE = 2,
  KAFT_NOT_FOUND = 3,
  KAFT_IO = 4,
  KAFT_TRAINING = 5,
  KAFT_TRANSPORT = 6,
  KAFT_TIMEOUT = 7,
  KAFT_RATE_LIMITED = 8,
  KAFT_MALFORMED_REPLY = 9,
  KAFT_CACHE_MISS = 10,
  KAFT_CONFLICT = 11,
  KAFT_INTERNAL = 12
} kaft_status;

typedef struct kaft_corpus kaft_corpus;
typedef struct kaft_service kaft_service;

/* Progress lines from long-running calls; may be NULL. */
typedef void (*kaft_progress_fn)(const char* line, void* user);

KAFT_API const char* kaft_version(void);
KAFT_API const char* kaft_status_name(kaft_status status);
KAFT_API const char* kaft_last_error(void);
KAFT_API void kaft_string_free(char* s);

/* --- corpus --------------------------------------------------------------- */

/* spec_json may be NULL or "{}" for the default synthetic spec. */
KAFT_API kaft_status kaft_corpus_synth(const char* spec_json, uint64_t seed, kaft_corpus** out);
/* path: a corpus directory or a single .jsonl file. */
KAFT_API kaft_status kaft_corpus_load(const char* path, kaft_corpus** out);
KAFT_API kaft_status kaft_corpus_save(const kaft_corpus* corpus, const char* dir);
/* Split sizes, KB sizes and decision mix. */
KAFT_API kaft_status kaft_corpus_stats(const kaft_corpus* corpus, char** stats_json);
KAFT_API void kaft_corpus_free(kaft_corpus* corpus);

/* --- training (checkpoints go into a bundle directory) --------------------- */

/* Creates the bundle or checks that config_json matches an existing one.
 * config_json may be NULL to open an existing bundle unchanged. */
KAFT_API kaft_status kaft_bundle_init(const char* bundle_dir, const char* config_json, char** resolved_json);

/* role: "all", "product" or "faq". */
KAFT_API kaft_status kaft_train_retriever(const kaft_corpus* corpus, const char* bundle_dir, const char* role,
                                          char** result_json);
/* knowledge: "none", "retrieved", "oracle", "agent" or "agent-gold". */
KAFT_API kaft_status kaft_train_generator(const kaft_corpus* corpus, const char* bundle_dir, const char* knowledge,
                                          char** result_json);
KAFT_API kaft_status kaft_train_decision(const kaft_corpus* corpus, const char* bundle_dir, char** result_json);

/* --- evaluation and experiments ------------------------------------------- */

/* eval_json: {"system", "regime", "train_knowledge"?, "test_knowledge"?,
 * "split"?, "llm"?}. Writes the report JSON. When traces_path is not NULL the
 * per-turn traces are written there as JSON lines. */
KAFT_API kaft_status kaft_evaluate(const kaft_corpus* corpus, const char* bundle_dir, const char* eval_json,
                                   const char* traces_path, char** report_json);

/* Runs an experiment manifest under out_root; returns results JSON whose
 * "table" field holds the rendered comparison table. */
KAFT_API kaft_status kaft_run_experiment(const char* manifest_json, const char* out_root,
                                         kaft_progress_fn progress, void* user, char** result_json);

/* --- chat service --------------------------------------------------------- */

/* config_json: {"bundle_dir", "corpus_path", "llm"?, "event_log"?, "host"?,
 * "port"?}. */
KAFT_API kaft_status kaft_service_create(const char* config_json, kaft_service** out);
/* In-process request: method "GET" or "POST", path like "/sessions". */
KAFT_API kaft_status kaft_service_request(kaft_service* service, const char* method, const char* path,
                                          const char* body, int* http_status, char** response_json);
/* Serves HTTP until kaft_service_stop(); port 0 picks a free port, which is
 * reported through on_ready (may be NULL). */
KAFT_API kaft_status kaft_service_serve(kaft_service* service, const char* host, int port,
                                        void (*on_ready)(int port, void* user), void* user);
KAFT_API void kaft_service_stop(kaft_service* service);
KAFT_API void kaft_service_free(kaft_service* service);

#ifdef __cplusplus
}
#endif

#endif /* KAFT_KAFT_H_ */
