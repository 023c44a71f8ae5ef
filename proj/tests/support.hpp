#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "discourse/dataset_store.hpp"
#include "discourse/llm_provider.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(FIXTURE_DIR) / name; }
inline std::filesystem::path config_file(const std::string& name) { return std::filesystem::path(CONFIG_DIR) / name; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("discourse-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline discourse::Passage make_passage(const std::string& id, std::size_t qa_count) {
  discourse::Passage p;
  p.passage_id = id;
  p.title = "Title " + id;
  p.body = "Body of " + id + ".";
  p.source = id;
  for (std::size_t i = 0; i < qa_count; ++i)
    p.qa_pairs.push_back({"Question " + std::to_string(i) + " of " + id + "?", "Answer " + std::to_string(i),
                          i % 2 ? discourse::QuestionKind::Implicit : discourse::QuestionKind::Explicit});
  return p;
}

inline std::shared_ptr<discourse::Dataset> make_dataset(std::size_t passages, std::size_t qa_each) {
  auto ds = std::make_shared<discourse::Dataset>();
  ds->name = "synthetic";
  for (std::size_t i = 0; i < passages; ++i) ds->passages.push_back(make_passage("p" + std::to_string(i), qa_each));
  return ds;
}

// Moderator that answers every directive with "<key>".
inline discourse::ProviderPtr echo_provider() {
  return std::make_shared<discourse::ScriptedProvider>(std::map<std::string, std::string>{}, "<{key}>");
}

struct ProcessResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs a shell command, capturing stdout and stderr separately.
inline ProcessResult run_command(const std::string& command) {
  TempDir tmp;
  const auto err_path = tmp / "stderr";
  const auto full = command + " 2>" + err_path.string();
  ProcessResult r;
  FILE* pipe = ::popen(full.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  int status = ::pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_path);
  return r;
}

inline std::string quoted(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

}  // namespace testing
