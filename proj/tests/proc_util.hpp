#pragma once

#include <sys/wait.h>

#include <cstdio>
#include <string>

namespace fsrc::testing {

struct Proc {
  int status = -1;
  std::string output;
};

/// Runs a shell command line with stderr folded into the captured output.
inline Proc run_command(const std::string& cmdline) {
  Proc p;
  FILE* pipe = popen((cmdline + " 2>&1").c_str(), "r");
  if (!pipe) return p;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) p.output.append(buf, n);
  const int st = pclose(pipe);
  p.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return p;
}

}  // namespace fsrc::testing
