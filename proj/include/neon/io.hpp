#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include "neon/error.hpp"

namespace neon {

/// Field order is preserved so emitted files follow the documented schemas.
using json = nlohmann::ordered_json;

namespace io {

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary file and renames, so readers never observe a
/// half-written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<json> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string(), lineno, e.what());
        }
    }
    return rows;
}

template <typename Range>
std::string to_jsonl(const Range& rows)
{
    std::string out;
    for (const auto& row : rows) {
        out += json(row).dump();
        out.push_back('\n');
    }
    return out;
}

template <typename Range>
void write_jsonl(const std::filesystem::path& path, const Range& rows)
{
    write_file_atomic(path, to_jsonl(rows));
}

/// Append-only log whose appends are durable once `append` returns.
class DurableAppender {
  public:
    explicit DurableAppender(const std::filesystem::path& path)
    {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd_ < 0) throw IoError("cannot open " + path.string() + " for append");
    }
    DurableAppender(const DurableAppender&) = delete;
    DurableAppender& operator=(const DurableAppender&) = delete;
    ~DurableAppender()
    {
        if (fd_ >= 0) ::close(fd_);
    }

    void append(std::string_view line)
    {
        std::string buf(line);
        buf.push_back('\n');
        std::size_t off = 0;
        while (off < buf.size()) {
            auto n = ::write(fd_, buf.data() + off, buf.size() - off);
            if (n < 0) throw IoError("append failed");
            off += static_cast<std::size_t>(n);
        }
        if (::fsync(fd_) != 0) throw IoError("fsync failed");
    }

  private:
    int fd_ = -1;
};

/// Minimal RFC 4180 reader: quoted fields, doubled quotes, embedded newlines.
class CsvReader {
  public:
    CsvReader(std::string content, char sep = ',') : data_(std::move(content)), sep_(sep) {}

    static CsvReader open(const std::filesystem::path& path, char sep = ',')
    {
        return CsvReader(read_file(path), sep);
    }

    /// Reads the next record. Returns false at end of input.
    bool next(std::vector<std::string>& fields)
    {
        fields.clear();
        if (pos_ >= data_.size()) return false;
        std::string cur;
        bool quoted = false;
        bool any = false;
        while (pos_ < data_.size()) {
            char c = data_[pos_++];
            any = true;
            if (quoted) {
                if (c == '"') {
                    if (pos_ < data_.size() && data_[pos_] == '"') {
                        cur.push_back('"');
                        ++pos_;
                    } else {
                        quoted = false;
                    }
                } else {
                    cur.push_back(c);
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == sep_) {
                fields.push_back(std::move(cur));
                cur.clear();
            } else if (c == '\n' || c == '\r') {
                if (c == '\r' && pos_ < data_.size() && data_[pos_] == '\n') ++pos_;
                break;
            } else {
                cur.push_back(c);
            }
        }
        if (quoted) throw ParseError("csv", record_ + 1, "unterminated quoted field");
        fields.push_back(std::move(cur));
        ++record_;
        return any;
    }

    std::size_t records_read() const noexcept { return record_; }

  private:
    std::string data_;
    char sep_;
    std::size_t pos_ = 0;
    std::size_t record_ = 0;
};

inline bool is_blank_record(const std::vector<std::string>& fields)
{
    return fields.size() == 1 && fields[0].find_first_not_of(" \t\r") == std::string::npos;
}

}  // namespace io
}  // namespace neon
