import { App } from "./app";

window.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app element");
  }
  const app = new App(root);
  app.load().catch((err) => {
    root.innerHTML = `<pre class="error-panel">${String(err)}</pre>`;
  });
});
