import { ApiClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (root) {
  // Served by the twin itself under /ui, so the API is same-origin.
  new App(root, new ApiClient("")).start();
}
