#pragma once

// Runs the sinsemi executable (path baked in at build time) and reads the
// CSV files it writes.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#ifndef SINSEMI_CLI_PATH
#error "SINSEMI_CLI_PATH must point at the sinsemi executable"
#endif

namespace testing {

inline std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

// Exit code of `sinsemi <args>`; stdout and stderr go to `log` when given.
inline int run_cli(const std::vector<std::string>& args, const std::string& log = "") {
    std::string cmd = shell_quote(SINSEMI_CLI_PATH);
    for (const auto& a : args) cmd += " " + shell_quote(a);
    cmd += log.empty() ? " >/dev/null 2>&1" : " >" + shell_quote(log) + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

// Relative paths of every regular file under dir, sorted.
inline std::vector<std::string> list_files(const std::filesystem::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), dir).string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace testing
