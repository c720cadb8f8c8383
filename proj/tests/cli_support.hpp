// Helpers for driving the command-line binary from tests.
#pragma once

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <nlohmann/json.hpp>

namespace sdream::testing {

struct CliRun {
  int code = -1;
  std::string out;
};

/// Runs the CLI with `args`, capturing stdout; stderr is discarded.
inline CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(SDREAM_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  CliRun r;
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// The JSON payload of the final "RESULT " line, or null.
inline nlohmann::json result_of(const CliRun& r) {
  const auto pos = r.out.rfind("RESULT ");
  if (pos == std::string::npos) return {};
  return nlohmann::json::parse(r.out.substr(pos + 7));
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace sdream::testing
