#pragma once

// Real HTTP(S) transport backed by cpp-httplib. Kept apart from
// annotator.hpp so that code using only stub transports does not pull in
// the HTTP stack.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "anchor/annotator.hpp"

namespace anchor {

class HttplibTransport : public Transport {
public:
    HttpResponse post(const std::string& base_url, const std::string& path, const std::string& body,
                      const Headers& headers, double timeout_seconds) override {
        // split "scheme://host[:port]/prefix" into client address and path prefix
        const auto scheme_end = base_url.find("://");
        const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
        const auto slash = base_url.find('/', host_start);
        const std::string origin = slash == std::string::npos ? base_url : base_url.substr(0, slash);
        const std::string prefix = slash == std::string::npos ? "" : base_url.substr(slash);
        httplib::Client client(origin);
        const auto secs = static_cast<time_t>(timeout_seconds);
        const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        httplib::Headers h;
        std::string content_type = "application/json";
        for (const auto& [k, v] : headers) {
            if (k == "Content-Type") content_type = v;
            else h.emplace(k, v);
        }
        HttpResponse out;
        auto res = client.Post(prefix + path, h, body, content_type);
        if (!res) {
            out.error = httplib::to_string(res.error());
            return out;
        }
        out.status = res->status;
        out.body = res->body;
        return out;
    }
};

}  // namespace anchor
