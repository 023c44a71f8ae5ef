#include "discourse/dataset_store.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

namespace discourse {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(QuestionKind kind) {
  return kind == QuestionKind::Implicit ? "implicit" : "explicit";
}

DatasetError::DatasetError(DatasetErrc code, const std::string& detail)
    : std::runtime_error(detail), code_(code) {}

DatasetFormat parse_dataset_format(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "canonical") return DatasetFormat::Canonical;
  if (lower == "fairytaleqa") return DatasetFormat::FairytaleQA;
  throw DatasetError(DatasetErrc::UnknownFormat, fmt::format("unknown dataset format '{}'", name));
}

std::string_view to_string(DatasetFormat format) {
  return format == DatasetFormat::FairytaleQA ? "fairytaleqa" : "canonical";
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(DatasetErrc::Io, fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string trim(std::string_view s) {
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  auto b = std::find_if_not(s.begin(), s.end(), ws);
  auto e = std::find_if_not(s.rbegin(), s.rend(), ws).base();
  return b < e ? std::string(b, e) : std::string();
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Returns false when the text is not a recognised kind.
bool parse_kind(std::string_view text, QuestionKind& kind) {
  auto t = lowercase(trim(text));
  if (t == "explicit") {
    kind = QuestionKind::Explicit;
    return true;
  }
  if (t == "implicit") {
    kind = QuestionKind::Implicit;
    return true;
  }
  kind = QuestionKind::Explicit;
  return false;
}

const std::string& require_string(const json& obj, const char* field, std::string_view locus) {
  auto it = obj.find(field);
  if (it == obj.end())
    throw DatasetError(DatasetErrc::ParseError, fmt::format("{}: missing field '{}'", locus, field));
  if (!it->is_string())
    throw DatasetError(DatasetErrc::ParseError, fmt::format("{}: field '{}' must be a string", locus, field));
  return it->get_ref<const std::string&>();
}

void check_unique_ids(const std::vector<Passage>& passages, std::string_view origin) {
  std::unordered_set<std::string> seen;
  for (const auto& p : passages)
    if (!seen.insert(p.passage_id).second)
      throw DatasetError(DatasetErrc::DuplicatePassageId,
                         fmt::format("{}: duplicate passage_id '{}'", origin, p.passage_id));
}

}  // namespace

// ---------------------------------------------------------------------------
// Canonical line-delimited records

Dataset load_canonical(const fs::path& path) {
  const std::string bytes = read_file(path);
  Dataset ds;
  ds.name = path.stem().string();
  ds.source_digest = sha256_hex(bytes);

  std::unordered_map<std::string, std::size_t> line_of_id;
  std::istringstream in(bytes);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto locus = fmt::format("{}: line {}", path.filename().string(), line_no);

    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DatasetError(DatasetErrc::ParseError, fmt::format("{}: invalid JSON ({})", locus, e.what()));
    }
    if (!rec.is_object()) throw DatasetError(DatasetErrc::ParseError, locus + ": record must be an object");

    Passage p;
    p.passage_id = require_string(rec, "passage_id", locus);
    if (trim(p.passage_id).empty())
      throw DatasetError(DatasetErrc::ParseError, locus + ": passage_id is empty");
    const auto rec_locus = fmt::format("{} (passage '{}')", locus, p.passage_id);
    p.title = rec.contains("title") ? require_string(rec, "title", rec_locus) : std::string();
    p.body = require_string(rec, "body", rec_locus);
    p.source = rec.contains("source") ? require_string(rec, "source", rec_locus) : p.passage_id;

    auto qa = rec.find("qa");
    if (qa == rec.end() || !qa->is_array())
      throw DatasetError(DatasetErrc::ParseError, rec_locus + ": field 'qa' must be an array");
    for (std::size_t i = 0; i < qa->size(); ++i) {
      const auto& item = (*qa)[i];
      const auto qa_locus = fmt::format("{} qa[{}]", rec_locus, i);
      if (!item.is_object()) throw DatasetError(DatasetErrc::ParseError, qa_locus + ": must be an object");
      QAPair pair;
      pair.question = require_string(item, "question", qa_locus);
      pair.answer = require_string(item, "answer", qa_locus);
      if (trim(pair.question).empty() || trim(pair.answer).empty())
        throw DatasetError(DatasetErrc::ParseError, qa_locus + ": question and answer must be non-empty");
      std::string kind_text = item.contains("kind") ? require_string(item, "kind", qa_locus) : "explicit";
      if (!parse_kind(kind_text, pair.kind))
        ds.load_warnings.push_back(
            fmt::format("{}: unknown kind '{}', treated as explicit", qa_locus, kind_text));
      p.qa_pairs.push_back(std::move(pair));
    }

    auto [it, inserted] = line_of_id.emplace(p.passage_id, line_no);
    if (!inserted)
      throw DatasetError(DatasetErrc::DuplicatePassageId,
                         fmt::format("{}: duplicate passage_id '{}' (first seen on line {})", locus,
                                     p.passage_id, it->second));
    ds.passages.push_back(std::move(p));
  }
  if (ds.passages.empty())
    throw DatasetError(DatasetErrc::EmptyDataset, fmt::format("{}: no passages", path.string()));
  return ds;
}

// ---------------------------------------------------------------------------
// FairytaleQA CSV adapter

namespace {

// RFC 4180 rows: quoted fields may contain commas, doubled quotes and
// newlines. Each row records the 1-based line on which it starts.
struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

std::vector<CsvRow> parse_csv(std::string_view text, std::string_view origin) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  row.line = 1;

  auto end_field = [&] {
    row.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    bool blank = row.fields.size() == 1 && row.fields[0].empty();
    if (!blank) rows.push_back(std::move(row));
    row = CsvRow{};
    row.line = line;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field_started && !field.empty())
          throw DatasetError(DatasetErrc::ParseError,
                             fmt::format("{}: line {}: stray quote inside unquoted field", origin, line));
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        ++line;
        end_row();
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes)
    throw DatasetError(DatasetErrc::ParseError,
                       fmt::format("{}: line {}: unterminated quoted field", origin, row.line));
  if (field_started || !row.fields.empty()) end_row();
  return rows;
}

std::size_t column_of(const std::vector<std::string>& header, std::initializer_list<std::string_view> names,
                      std::string_view origin) {
  for (auto name : names)
    for (std::size_t i = 0; i < header.size(); ++i)
      if (lowercase(trim(header[i])) == name) return i;
  throw DatasetError(DatasetErrc::ParseError,
                     fmt::format("{}: line 1: header lacks column '{}'", origin, *names.begin()));
}

}  // namespace

Dataset load_fairytaleqa(const fs::path& path) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  if (files.empty()) throw DatasetError(DatasetErrc::EmptyDataset, path.string() + ": no CSV files");

  Dataset ds;
  ds.name = path.stem().string();
  std::string all_bytes;

  // (story, section text) -> index into ds.passages
  std::map<std::pair<std::string, std::string>, std::size_t> passage_index;
  std::unordered_map<std::string, std::size_t> sections_per_story;

  for (const auto& file : files) {
    const std::string bytes = read_file(file);
    all_bytes += bytes;
    const std::string origin = file.filename().string();
    auto rows = parse_csv(bytes, origin);
    if (rows.empty()) continue;

    const auto& header = rows.front().fields;
    const auto c_story = column_of(header, {"story_name"}, origin);
    const auto c_section = column_of(header, {"story_section", "content"}, origin);
    const auto c_question = column_of(header, {"question"}, origin);
    const auto c_answer = column_of(header, {"answer1", "answer"}, origin);
    const auto c_kind = column_of(header, {"ex-or-im1", "ex_or_im", "ex-or-im"}, origin);
    const auto width = header.size();

    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      const auto locus = fmt::format("{}: line {}", origin, row.line);
      if (row.fields.size() != width)
        throw DatasetError(DatasetErrc::ParseError,
                           fmt::format("{}: expected {} fields, found {}", locus, width, row.fields.size()));
      auto story = trim(row.fields[c_story]);
      auto section = trim(row.fields[c_section]);
      QAPair pair;
      pair.question = trim(row.fields[c_question]);
      pair.answer = trim(row.fields[c_answer]);
      if (story.empty()) throw DatasetError(DatasetErrc::ParseError, locus + ": empty story_name");
      if (pair.question.empty() || pair.answer.empty())
        throw DatasetError(DatasetErrc::ParseError,
                           fmt::format("{} (story '{}'): question and answer must be non-empty", locus, story));
      if (!parse_kind(row.fields[c_kind], pair.kind))
        ds.load_warnings.push_back(fmt::format("{}: unknown kind '{}', treated as explicit", locus,
                                               trim(row.fields[c_kind])));

      auto key = std::make_pair(story, section);
      auto it = passage_index.find(key);
      if (it == passage_index.end()) {
        Passage p;
        p.passage_id = fmt::format("{}-{}", story, ++sections_per_story[story]);
        p.title = story;
        p.body = section;
        p.source = story;
        it = passage_index.emplace(key, ds.passages.size()).first;
        ds.passages.push_back(std::move(p));
      }
      ds.passages[it->second].qa_pairs.push_back(std::move(pair));
    }
  }
  ds.source_digest = sha256_hex(all_bytes);
  if (ds.passages.empty()) throw DatasetError(DatasetErrc::EmptyDataset, path.string() + ": no question rows");
  check_unique_ids(ds.passages, path.string());
  return ds;
}

Dataset load_dataset(const fs::path& path, DatasetFormat format) {
  if (!fs::exists(path)) throw DatasetError(DatasetErrc::Io, fmt::format("{} does not exist", path.string()));
  return format == DatasetFormat::FairytaleQA ? load_fairytaleqa(path) : load_canonical(path);
}

// ---------------------------------------------------------------------------

const Passage& select_passage(const Dataset& dataset, std::size_t min_qa_pairs, std::uint64_t seed) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.passages.size(); ++i)
    if (dataset.passages[i].qa_pairs.size() >= min_qa_pairs) eligible.push_back(i);
  if (eligible.empty())
    throw DatasetError(DatasetErrc::NoEligiblePassage,
                       fmt::format("no passage in '{}' has at least {} QA pairs", dataset.name, min_qa_pairs));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  return dataset.passages[eligible[pick(rng)]];
}

ValidationReport validate_dataset(const Dataset& dataset) {
  ValidationReport r;
  r.dataset_name = dataset.name;
  r.source_digest = dataset.source_digest;
  r.passage_count = dataset.passages.size();
  r.warnings = dataset.load_warnings;
  r.kind_histogram[QuestionKind::Explicit] = 0;
  r.kind_histogram[QuestionKind::Implicit] = 0;

  std::set<std::string> sources;
  for (const auto& p : dataset.passages) {
    sources.insert(p.source.empty() ? p.passage_id : p.source);
    r.question_count += p.qa_pairs.size();
    ++r.qa_histogram[p.qa_pairs.size()];
    for (const auto& qa : p.qa_pairs) ++r.kind_histogram[qa.kind];
    if (trim(p.body).empty()) r.warnings.push_back(fmt::format("passage '{}': empty body", p.passage_id));
    if (p.qa_pairs.empty()) r.warnings.push_back(fmt::format("passage '{}': no QA pairs", p.passage_id));
  }
  r.distinct_sources = sources.size();
  return r;
}

std::string format_report(const ValidationReport& r) {
  std::string out;
  out += fmt::format("dataset: {}\n", r.dataset_name);
  out += fmt::format("digest: sha256:{}\n", r.source_digest);
  out += fmt::format("passages: {}\n", r.passage_count);
  out += fmt::format("sources: {}\n", r.distinct_sources);
  out += fmt::format("questions: {}\n", r.question_count);
  out += fmt::format("  explicit: {}\n", r.kind_histogram.at(QuestionKind::Explicit));
  out += fmt::format("  implicit: {}\n", r.kind_histogram.at(QuestionKind::Implicit));
  out += "qa pairs per passage:\n";
  for (const auto& [pairs, count] : r.qa_histogram) out += fmt::format("  {:>3}: {}\n", pairs, count);
  out += fmt::format("warnings: {}\n", r.warnings.size());
  for (const auto& w : r.warnings) out += "  " + w + "\n";
  return out;
}

}  // namespace discourse
