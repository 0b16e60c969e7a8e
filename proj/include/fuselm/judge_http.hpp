#pragma once

// HTTP transport for the judge: POSTs the request as a JSON body to a scoring
// endpoint and returns the raw reply text for judge_score to parse. Kept out
// of eval.hpp so offline builds don't pay for the HTTP stack.

#include <string>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "fuselm/eval.hpp"

namespace fuselm {

class HttpJudgeClient : public JudgeClient {
 public:
  HttpJudgeClient(std::string host, int port, std::string path = "/score")
      : host_(std::move(host)), port_(port), path_(std::move(path)) {}

  std::string score_text(const JudgeRequest& request) override {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(10, 0);
    client.set_read_timeout(30, 0);
    nlohmann::json body = {{"question", request.question},
                           {"reference", request.reference},
                           {"response", request.response},
                           {"rubric", request.rubric}};
    // A byte-level model can answer with arbitrary bytes; strict JSON
    // serialization would throw on invalid UTF-8, so malformed sequences are
    // replaced with U+FFFD — the judge still sees that the answer is garbage.
    std::string payload = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    httplib::Result res = client.Post(path_, payload, "application/json");
    if (!res)
      fail(ErrorKind::service, "judge endpoint ", host_, ":", port_, path_, " unreachable: ",
           httplib::to_string(res.error()));
    if (res->status != 200)
      fail(ErrorKind::service, "judge endpoint ", host_, ":", port_, path_, " returned HTTP ", res->status);
    return res->body;
  }

 private:
  std::string host_;
  int port_;
  std::string path_;
};

}  // namespace fuselm
