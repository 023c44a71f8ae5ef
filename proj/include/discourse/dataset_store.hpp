#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace discourse {

enum class QuestionKind { Explicit, Implicit };

std::string_view to_string(QuestionKind kind);

struct QAPair {
  std::string question;
  std::string answer;
  QuestionKind kind = QuestionKind::Explicit;
};

struct Passage {
  std::string passage_id;
  std::string title;
  std::string body;
  std::vector<QAPair> qa_pairs;
  // Originating story or document; equals passage_id for canonical records.
  std::string source;
};

struct Dataset {
  std::string name;
  std::vector<Passage> passages;
  std::string source_digest;  // sha256 hex over the ingested bytes
  std::vector<std::string> load_warnings;
};

enum class DatasetErrc { Io, ParseError, EmptyDataset, DuplicatePassageId, NoEligiblePassage, UnknownFormat };

class DatasetError : public std::runtime_error {
 public:
  DatasetError(DatasetErrc code, const std::string& detail);
  DatasetErrc code() const noexcept { return code_; }

 private:
  DatasetErrc code_;
};

enum class DatasetFormat { Canonical, FairytaleQA };

DatasetFormat parse_dataset_format(std::string_view name);
std::string_view to_string(DatasetFormat format);

// Canonical format: UTF-8, one JSON object per line:
//   {"passage_id": "...", "title": "...", "body": "...",
//    "qa": [{"question": "...", "answer": "...", "kind": "explicit"}]}
// Blank lines are skipped. Errors carry "line N".
Dataset load_canonical(const std::filesystem::path& path);

// FairytaleQA question tables (CSV with header). `path` may be a single CSV
// file or a directory; every *.csv inside is read in name order.
//
// Column mapping (first match wins):
//   story_name                       -> Passage.source, title
//   story_section | content          -> Passage.body (grouping key with story)
//   question                         -> QAPair.question
//   answer1 | answer                 -> QAPair.answer
//   ex-or-im1 | ex_or_im | ex-or-im  -> QAPair.kind
// Rows sharing (story_name, section text) form one passage, numbered per
// story in first-seen order: "<story_name>-<n>".
Dataset load_fairytaleqa(const std::filesystem::path& path);

Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format = DatasetFormat::Canonical);

// Uniform choice among passages with at least `min_qa_pairs` pairs, driven by
// a std::mt19937_64 seeded with `seed`.
const Passage& select_passage(const Dataset& dataset, std::size_t min_qa_pairs, std::uint64_t seed);

struct ValidationReport {
  std::string dataset_name;
  std::string source_digest;
  std::size_t passage_count = 0;
  std::size_t question_count = 0;
  std::size_t distinct_sources = 0;
  std::map<QuestionKind, std::size_t> kind_histogram;
  // qa-pairs-per-passage -> number of passages
  std::map<std::size_t, std::size_t> qa_histogram;
  std::vector<std::string> warnings;
};

ValidationReport validate_dataset(const Dataset& dataset);

std::string format_report(const ValidationReport& report);

std::string sha256_hex(std::string_view bytes);

}  // namespace discourse
